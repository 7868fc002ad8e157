use clap::Parser;

fn main() {
    let cli = windcast_cli::Cli::parse();
    match windcast_cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
