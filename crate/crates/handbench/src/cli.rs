//! Command line entry point (placeholder while subcommands land).

pub fn run() -> i32 {
    eprintln!("handbench: commands not wired up yet");
    2
}
