fn main() -> std::process::ExitCode {
    zadapt::cli::main()
}
