fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SDVIT_LOG", "warn")).init();
    std::process::exit(sdvit::cli::run(std::env::args_os()));
}
