fn main() -> std::process::ExitCode {
    statemix::bench::cli::main()
}
