fn main() {
    std::process::exit(bfgpu::cli::run(std::env::args_os()));
}
