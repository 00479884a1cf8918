fn main() {
    std::process::exit(ipreg::cli::run());
}
