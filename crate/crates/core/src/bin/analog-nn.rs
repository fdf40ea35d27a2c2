fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let stdin = std::io::stdin();
    let code = analog_nn::cli::run(std::env::args_os(), &mut std::io::stdout(), &mut stdin.lock());
    std::process::exit(code);
}
