use clap::Parser;

fn main() {
    // PRUNEKIT_THREADS caps the worker pool for everything except `bench`,
    // which pins its own pool from --threads.
    if let Ok(v) = std::env::var("PRUNEKIT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = prunekit_cli::Cli::parse();
    if let Err(e) = prunekit_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
