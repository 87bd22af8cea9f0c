use clap::Parser;
use maglev_dfc::cli::Cli;

fn main() {
    let cli = Cli::parse();
    match maglev_dfc::run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
