use std::process::Command;

fn main() {
    let hash = std::env::var("FETSIM_BUILD_HASH").ok().or_else(|| {
        Command::new("git")
            .args(["rev-parse", "--short=12", "HEAD"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
    });
    println!("cargo:rustc-env=FETSIM_BUILD_HASH={}", hash.unwrap_or_else(|| "unknown".into()));
    println!("cargo:rerun-if-env-changed=FETSIM_BUILD_HASH");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
