fn main() {
    std::process::exit(mlcnn_cli::main_with_args(std::env::args_os()));
}
