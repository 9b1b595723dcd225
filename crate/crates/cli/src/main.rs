use clap::Parser;

fn main() {
    let cli = match dwd_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = dwd_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(dwd_cli::exit_code(&e));
    }
}
