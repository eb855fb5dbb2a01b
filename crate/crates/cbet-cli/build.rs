use std::process::Command;

fn main() {
    // Reports embed a build id so results can be traced to a source state.
    // Outside a git checkout the package version stands in.
    let id = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")));
    println!("cargo:rustc-env=CBET_BUILD_ID={id}");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
