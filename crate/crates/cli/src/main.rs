use clap::Parser;
use tmu_cli::{run, Cli, EXIT_USAGE};

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli, &mut std::io::stdout().lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tmu-sim: {e}");
            EXIT_USAGE
        }
    };
    std::process::exit(code);
}
