use foodcast_core::cli;

fn main() {
    env_logger::init();
    match cli::run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
