fn main() {
    std::process::exit(social_mae::cli::main_exit());
}
