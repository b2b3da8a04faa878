fn main() {
    std::process::exit(ttlvc::cli_main());
}
