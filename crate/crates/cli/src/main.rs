fn main() {
    std::process::exit(gdt_cli::dispatch(std::env::args_os()));
}
