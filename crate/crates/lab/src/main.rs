fn main() {
    std::process::exit(mjp_lab::cli::main());
}
