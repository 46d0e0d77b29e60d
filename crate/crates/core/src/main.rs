fn main() -> std::process::ExitCode {
    microtee::harness::cli::main()
}
