use clap::Parser;
use fedunlearn_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if let Some(m) = &outcome.metrics {
                println!("{}", serde_json::to_string_pretty(m).expect("metrics serialize"));
            }
            if let Some(g) = &outcome.gradcheck {
                for m in &g.models {
                    println!(
                        "{}: max relative error {:.3e}, fisher diagonal error {:.3e}",
                        m.model, m.max_grad_rel_error, m.fim_rel_error
                    );
                }
            }
            for p in &outcome.written {
                eprintln!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
