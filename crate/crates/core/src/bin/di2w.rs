fn main() {
    std::process::exit(denoise_i2w::cli::run(std::env::args_os()));
}
