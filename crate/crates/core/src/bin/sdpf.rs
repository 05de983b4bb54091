fn main() {
    env_logger::init();
    std::process::exit(sdpf::cli::run(std::env::args_os()));
}
