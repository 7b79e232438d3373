fn main() -> std::process::ExitCode {
    xmltag::cli::main_with_args(std::env::args_os())
}
