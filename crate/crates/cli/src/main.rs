fn main() -> std::process::ExitCode {
    spillover_cli::main_entry()
}
