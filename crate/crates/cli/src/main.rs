use clap::Parser;

fn main() {
    let cli = match vital_cli::Cli::try_parse() {
        Ok(c) => c,
        // Usage errors, --help and --version; clap picks the exit code.
        Err(e) => e.exit(),
    };
    if let Err(e) = vital_cli::execute(cli.command) {
        eprintln!("{}", e.line());
        std::process::exit(e.category.exit_code());
    }
}
