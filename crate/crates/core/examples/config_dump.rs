//! Prints the default configuration as a commented TOML file, ready to edit
//! and pass with `--config`.

fn main() {
    print!("{}", cooptrack::config::Config::default().to_commented_toml());
}
