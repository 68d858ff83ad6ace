fn main() {
    std::process::exit(sae_steer::cli::run(std::env::args_os()));
}
