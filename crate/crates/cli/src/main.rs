fn main() {
    std::process::exit(rislab_cli::main_entry());
}
