use voxdiff::nn::cancel;

/// The first interrupt asks training loops to checkpoint and stop; a second
/// one exits immediately.
fn install_interrupt_handler() {
    std::thread::spawn(|| {
        let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() else { return };
        rt.block_on(async {
            if tokio::signal::ctrl_c().await.is_ok() {
                cancel::request();
            }
            if tokio::signal::ctrl_c().await.is_ok() {
                std::process::exit(voxdiff::pipeline::EXIT_CANCELLED);
            }
        });
    });
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    install_interrupt_handler();
    std::process::exit(voxdiff::pipeline::run(std::env::args_os()));
}
