fn main() {
    std::process::exit(dynbench_cli::run(std::env::args_os()));
}
