//! Summarize a results CSV grouped by one config column, with plot files.
//!
//!     cargo run --example report -- results.csv [column] [plot_dir]

use std::path::PathBuf;

use analog_nn::sweep::report::report;

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(csv) = args.next().map(PathBuf::from) else {
        eprintln!("usage: report <results.csv> [column] [plot_dir]");
        std::process::exit(1);
    };
    let by = args.next();
    let plots = args.next().map(PathBuf::from);
    match report(&csv, by.as_deref(), plots.as_deref()) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
