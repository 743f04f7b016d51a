fn main() {
    std::process::exit(choicemiss_cli::run(std::env::args_os()));
}
