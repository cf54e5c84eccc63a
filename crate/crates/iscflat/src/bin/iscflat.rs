fn main() {
    std::process::exit(iscflat::cli::run_from_env());
}
