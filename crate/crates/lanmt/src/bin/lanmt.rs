fn main() -> std::process::ExitCode {
    lanmt::cli::main()
}
