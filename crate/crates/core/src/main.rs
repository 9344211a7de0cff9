use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = varformer::cli::run(varformer::cli::Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
