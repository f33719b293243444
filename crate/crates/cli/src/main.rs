fn main() {
    std::process::exit(diffusim_cli::run(std::env::args_os()));
}
