fn main() {
    std::process::exit(hsi_paws::pipeline::run_command(std::env::args_os()));
}
