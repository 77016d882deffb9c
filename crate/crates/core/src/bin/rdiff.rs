fn main() {
    std::process::exit(recycled_diffusion::cli::run(std::env::args_os()));
}
