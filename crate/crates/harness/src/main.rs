fn main() -> std::process::ExitCode {
    ecoprune::cli::main()
}
