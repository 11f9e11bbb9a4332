use vitl_cli::admin::{cli_dispatch, EXIT_OK};

fn main() {
    let (code, text) = cli_dispatch(std::env::args_os());
    if !text.is_empty() {
        if code == EXIT_OK {
            println!("{}", text.trim_end());
        } else {
            eprintln!("{}", text.trim_end());
        }
    }
    std::process::exit(code);
}
