use std::process::ExitCode;

fn main() -> ExitCode {
    match tensorformer::run(std::env::args()) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("manifest: {}", outcome.manifest.display());
            ExitCode::SUCCESS
        }
        Err(tensorformer::CliError::Display(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
