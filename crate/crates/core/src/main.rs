fn main() {
    std::process::exit(matern_lasso::cli::main_entry());
}
