fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SMPC_FEDSIM_LOG", "warn")).init();
    std::process::exit(smpc_fedsim::cli::run(std::env::args_os()));
}
