fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RWT_LOG_LEVEL", "info")).init();
    std::process::exit(resrnn::cli::run(std::env::args_os()));
}
