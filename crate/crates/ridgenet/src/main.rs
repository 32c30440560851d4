fn main() {
    std::process::exit(ridgenet::cli::run(std::env::args_os()));
}
