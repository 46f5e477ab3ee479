use tracing_subscriber::EnvFilter;

fn main() {
    // Diagnostics go to stderr; POLYPHONY_LOG takes an EnvFilter directive.
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("POLYPHONY_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    std::process::exit(polyphony_cli::main_with(std::env::args_os()));
}
