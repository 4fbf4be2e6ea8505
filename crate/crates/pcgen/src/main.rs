use clap::Parser;

fn main() {
    let cli = match pcgen::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; only real mistakes are usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = pcgen::cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(pcgen::cli::exit_code(&err));
    }
}
