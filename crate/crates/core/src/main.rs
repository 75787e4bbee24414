use std::sync::atomic::{AtomicBool, Ordering};

static STOP: AtomicBool = AtomicBool::new(false);

fn main() {
    // the training loop polls this flag and checkpoints before exiting
    if let Err(e) = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst)) {
        eprintln!("warning: cannot install Ctrl-C handler: {e}");
    }
    std::process::exit(flux_core::cli::run(std::env::args_os(), Some(&STOP)));
}
