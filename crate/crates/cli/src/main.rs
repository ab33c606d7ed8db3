fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    burstnet::nn::retain_freed_memory();
    std::process::exit(burstnet_cli::run(std::env::args_os()));
}
