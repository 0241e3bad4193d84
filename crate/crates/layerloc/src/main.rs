fn main() -> std::process::ExitCode {
    layerloc::cli::run(std::env::args_os())
}
