//! Class table for the 19-class outdoor LiDAR label set.

use crate::scene::ClassId;

pub const NUM_CLASSES: u8 = 19;

pub const CLASS_NAMES: [&str; 19] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
];

pub const CAR: ClassId = 1;
pub const BICYCLE: ClassId = 2;
pub const MOTORCYCLE: ClassId = 3;
pub const TRUCK: ClassId = 4;
pub const PERSON: ClassId = 6;
pub const BICYCLIST: ClassId = 7;
pub const MOTORCYCLIST: ClassId = 8;
pub const ROAD: ClassId = 9;
pub const SIDEWALK: ClassId = 11;
pub const BUILDING: ClassId = 13;
pub const VEGETATION: ClassId = 15;
pub const POLE: ClassId = 18;

/// Classes that are mostly dynamic; removed from maps and ignored by mIoU.
pub const MOVING_CLASSES: [ClassId; 5] = [BICYCLE, MOTORCYCLE, PERSON, BICYCLIST, MOTORCYCLIST];

/// Display colors of the 19-class table, in class order.
pub const CLASS_COLORS: [[u8; 3]; 19] = [
    [100, 150, 245],
    [100, 230, 245],
    [30, 60, 150],
    [80, 30, 180],
    [100, 80, 250],
    [255, 30, 30],
    [255, 40, 200],
    [150, 30, 90],
    [255, 0, 255],
    [255, 150, 255],
    [75, 0, 75],
    [175, 0, 75],
    [255, 200, 0],
    [255, 120, 50],
    [0, 175, 0],
    [135, 60, 0],
    [150, 240, 80],
    [255, 240, 150],
    [255, 0, 0],
];

/// `#rrggbb` color of `id` in a table of `num_classes`: the fixed table for
/// 19 classes, evenly spaced hues otherwise.
pub fn class_color(id: ClassId, num_classes: u8) -> String {
    let [r, g, b] = if num_classes == NUM_CLASSES && (1..=NUM_CLASSES).contains(&id) {
        CLASS_COLORS[id as usize - 1]
    } else {
        let h = (id.saturating_sub(1)) as f64 / num_classes.max(1) as f64 * 6.0;
        let x = (1.0 - (h % 2.0 - 1.0).abs()) * 220.0;
        let (r, g, b) = match h as u32 {
            0 => (220.0, x, 0.0),
            1 => (x, 220.0, 0.0),
            2 => (0.0, 220.0, x),
            3 => (0.0, x, 220.0),
            4 => (x, 0.0, 220.0),
            _ => (220.0, 0.0, x),
        };
        [r as u8, g as u8, b as u8]
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

pub fn class_name(id: ClassId) -> Option<&'static str> {
    CLASS_NAMES.get((id as usize).checked_sub(1)?).copied()
}

pub fn class_id(name: &str) -> Option<ClassId> {
    CLASS_NAMES.iter().position(|n| *n == name).map(|i| i as ClassId + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for id in 1..=NUM_CLASSES {
            assert_eq!(class_id(class_name(id).unwrap()), Some(id));
        }
        assert_eq!(class_name(0), None);
        assert_eq!(class_name(20), None);
    }

    #[test]
    fn moving_set() {
        let names: Vec<_> = MOVING_CLASSES.iter().map(|&c| class_name(c).unwrap()).collect();
        assert_eq!(names, ["bicycle", "motorcycle", "person", "bicyclist", "motorcyclist"]);
    }

    #[test]
    fn colors() {
        assert_eq!(class_color(9, 19), "#ff00ff");
        let toy: Vec<_> = (1..=4).map(|c| class_color(c, 4)).collect();
        assert_eq!(toy.len(), 4);
        assert!(toy.windows(2).all(|w| w[0] != w[1]));
    }
}
