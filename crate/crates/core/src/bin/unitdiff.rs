fn main() -> std::process::ExitCode {
    unitdiff::cli::main()
}
