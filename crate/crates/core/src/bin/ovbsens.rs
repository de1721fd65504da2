//! Command-line entry point; see [`ovbsens::cli`].

fn main() {
    std::process::exit(ovbsens::cli::main_with_args(std::env::args_os()));
}
