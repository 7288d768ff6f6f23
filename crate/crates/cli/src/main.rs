fn main() {
    std::process::exit(ctxmod_cli::app::main_with(std::env::args().collect()));
}
