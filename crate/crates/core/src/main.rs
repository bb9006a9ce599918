fn main() {
    std::process::exit(uncertain_events::cli::run_from_env());
}
