mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use common::fixtures;
use regex::Regex;

struct Fpm {
    dir: tempfile::TempDir,
    pkg_path: String,
}

impl Fpm {
    fn new(fixture: &str) -> Fpm {
        Fpm { dir: tempfile::tempdir().unwrap(), pkg_path: fixtures().join(fixture).display().to_string() }
    }

    fn store(&self) -> std::path::PathBuf {
        self.dir.path().join("store")
    }

    fn command(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_fpm"));
        c.args(args)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", self.dir.path())
            .env("FPM_STORE", self.store())
            .env("FPM_STATE", self.dir.path().join("state"))
            .env("FPM_SYSTEM", "x86_64-linux")
            .env("FPM_PKG_PATH", &self.pkg_path)
            .env("FPM_USER", "alice");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.command(args).output().unwrap()
    }

    /// Runs and expects exit status `code`; returns stdout and stderr.
    fn expect(&self, code: i32, args: &[&str]) -> (String, String) {
        let o = self.run(args);
        let stdout = String::from_utf8(o.stdout).unwrap();
        let stderr = String::from_utf8(o.stderr).unwrap();
        assert_eq!(o.status.code(), Some(code), "fpm {args:?}\nstdout: {stdout}\nstderr: {stderr}");
        (stdout, stderr)
    }

    fn ok(&self, args: &[&str]) -> String {
        self.expect(0, args).0
    }

    fn installed(&self) -> Vec<String> {
        self.ok(&["package", "--list-installed"])
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                format!("{}@{}", f[0], f[1])
            })
            .collect()
    }
}

fn store_path_re(root: &Path) -> Regex {
    Regex::new(&format!("^{}/[0-9a-z]{{32}}-[^/]+$", regex::escape(&root.display().to_string()))).unwrap()
}

#[test]
fn config_reports_flags_over_environment() {
    let f = Fpm::new("hello");
    let out = f.ok(&["config"]);
    assert!(out.contains("system = x86_64-linux\n"), "{out}");
    assert!(out.contains("user = alice\n"));
    assert!(out.contains(&format!("store = {}\n", f.store().display())));
    let out = f.ok(&["--user", "bob", "-j", "3", "config"]);
    assert!(out.contains("user = bob\n") && out.contains("max-jobs = 3\n"), "{out}");
}

#[test]
fn install_remove_roll_back_and_upgrade() {
    let f = Fpm::new("registry");
    f.ok(&["package", "--install", "bigloo", "--install", "guile@1.8.8"]);
    assert_eq!(f.installed(), ["bigloo@3.9a", "guile@1.8.8"]);

    let (_, err) = f.expect(0, &["package", "--install", "guile", "--remove", "bigloo"]);
    assert!(err.contains("generation 2"), "{err}");
    assert_eq!(f.installed(), ["guile@2.0.7"]);

    f.ok(&["package", "--roll-back"]);
    assert_eq!(f.installed(), ["bigloo@3.9a", "guile@1.8.8"]);

    f.ok(&["package", "--upgrade", "^g.*"]);
    assert_eq!(f.installed(), ["bigloo@3.9a", "guile@2.0.7"]);
    let (_, err) = f.expect(0, &["package", "--upgrade", "^emacs"]);
    assert!(err.contains("nothing to be done"), "{err}");

    let gens = f.ok(&["package", "--list-generations"]);
    assert_eq!(gens, "1\n2\n3\t(current)\n");
}

#[test]
fn listing_available_packages() {
    let f = Fpm::new("hello");
    let out = f.ok(&["package", "--list-available", "^g"]);
    let fields: Vec<&str> = out.trim_end().split('\t').collect();
    assert_eq!(fields[..2], ["gawk", "4.0.0"]);
    assert!(fields[2].ends_with("hello/hello.pkg:4"), "{out}");
    assert_eq!(f.ok(&["package", "-A"]).lines().count(), 3);
    assert_eq!(f.ok(&["package", "-I"]), "");
}

#[test]
fn user_errors_exit_with_one() {
    let f = Fpm::new("hello");
    let (_, err) = f.expect(1, &["package", "--roll-back", "--install", "hello"]);
    assert!(err.contains("cannot be used with"), "{err}");
    f.expect(1, &["package"]);
    let (_, err) = f.expect(1, &["package", "--install", "emacs"]);
    assert!(err.contains("emacs"), "{err}");
    f.expect(1, &["package", "--remove", "hello"]);
    f.expect(1, &["package", "--roll-back"]);
    f.expect(1, &["package", "--list-available", "("]);
    f.expect(1, &["frobnicate"]);
    let (out, _) = f.expect(0, &["--help"]);
    assert!(out.contains("package"));
}

#[test]
fn build_prints_the_output_path_and_caches() {
    let f = Fpm::new("hello");
    let (out, err) = f.expect(0, &["build", "hello"]);
    let path = out.trim_end();
    assert!(store_path_re(&f.store()).is_match(path), "{path}");
    assert!(path.ends_with("-hello-2.8"));
    let launches = Regex::new(r"(?m)^(\d+) builders executed$").unwrap();
    let n: u32 = launches.captures(&err).unwrap()[1].parse().unwrap();
    assert!(n > 0, "{err}");
    let (again, err) = f.expect(0, &["build", "hello"]);
    assert_eq!(again, out);
    assert_eq!(&launches.captures(&err).unwrap()[1], "0", "{err}");
}

#[test]
fn build_failure_exits_with_two_and_names_the_log() {
    let f = Fpm::new("failing");
    let (out, err) = f.expect(2, &["build", "failing"]);
    assert_eq!(out, "");
    let log = Regex::new(r"build log: (\S+)").unwrap().captures(&err).unwrap()[1].to_string();
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.contains("1 of 3 tests failed"), "{text}");
}

#[test]
fn gc_keeps_installed_packages() {
    let f = Fpm::new("hello");
    f.ok(&["package", "-i", "gawk"]);
    f.ok(&["build", "hello"]);
    let dry = f.ok(&["gc", "--dry-run"]);
    let lines: Vec<&str> = dry.lines().collect();
    let report = lines.last().unwrap();
    let re = store_path_re(&f.store());
    let listed: BTreeSet<&str> = lines[..lines.len() - 1].iter().copied().collect();
    assert!(listed.iter().all(|l| re.is_match(l)), "{dry}");
    assert!(listed.iter().any(|l| l.ends_with("-hello-2.8")));
    assert!(!listed.iter().any(|l| l.ends_with("-gawk-4.0.0")));
    assert!(report.starts_with(&format!("would delete {} paths, free ", listed.len())), "{report}");
    for l in &listed {
        assert!(Path::new(l).exists());
    }

    let out = f.ok(&["gc"]);
    assert!(Regex::new(r"^deleted \d+ paths, freed \d+ bytes\n$").unwrap().is_match(&out), "{out}");
    for l in &listed {
        assert!(!Path::new(l).exists(), "{l}");
    }
    let installed = f.ok(&["package", "-I"]);
    let gawk = installed.trim_end().split('\t').nth(2).unwrap().to_string();
    assert!(Path::new(&gawk).join("share/gawk/gawk.txt").exists());
    assert_eq!(f.ok(&["gc"]), "deleted 0 paths, freed 0 bytes\n");
}

/// Nodes and edges of the DOT text, by label.
fn parse_dot(dot: &str) -> (BTreeSet<String>, BTreeSet<(String, String)>) {
    let node = Regex::new(r#"^  "([^"]+)" \[label="([^"]+)"\];$"#).unwrap();
    let edge = Regex::new(r#"^  "([^"]+)" -> "([^"]+)";$"#).unwrap();
    let mut labels = std::collections::BTreeMap::new();
    let mut edges = BTreeSet::new();
    assert!(dot.starts_with("digraph ") && dot.ends_with("}\n"), "{dot}");
    for line in dot.lines().skip(1) {
        if let Some(c) = node.captures(line) {
            labels.insert(c[1].to_string(), c[2].to_string());
        } else if let Some(c) = edge.captures(line) {
            edges.insert((c[1].to_string(), c[2].to_string()));
        } else {
            assert_eq!(line, "}", "unexpected line");
        }
    }
    let edges = edges.into_iter().map(|(a, b)| (labels[&a].clone(), labels[&b].clone())).collect();
    (labels.into_values().collect(), edges)
}

#[test]
fn graph_of_hello() {
    let f = Fpm::new("hello");
    let (nodes, edges) = parse_dot(&f.ok(&["graph", "hello"]));
    for n in ["hello-2.8.drv", "hello-2.8.tar.drv", "gawk-4.0.0.drv", "bash-4.2.drv"] {
        assert!(nodes.contains(n), "{n} missing from {nodes:?}");
    }
    for to in ["hello-2.8.tar.drv", "gawk-4.0.0.drv", "bash-4.2.drv"] {
        assert!(edges.contains(&("hello-2.8.drv".to_string(), to.to_string())), "{to}");
    }
    // nothing was built
    assert!(!f.store().read_dir().unwrap().any(|e| {
        let n = e.unwrap().file_name().into_string().unwrap();
        n.ends_with("-hello-2.8")
    }));
}

#[test]
fn graph_of_a_leaf_is_one_node() {
    let f = Fpm::new("hello");
    let dot = f.ok(&["graph", "hello"]);
    let leaf = Regex::new(r#""([^"]+-hello-2\.8\.tar\.drv)""#).unwrap().captures(&dot).unwrap()[1].to_string();
    let path = f.store().join(leaf).display().to_string();
    let (nodes, edges) = parse_dot(&f.ok(&["graph", &path]));
    assert_eq!(nodes.into_iter().collect::<Vec<_>>(), ["hello-2.8.tar.drv"]);
    assert!(edges.is_empty());
}

#[test]
fn graph_of_the_bootstrap() {
    let f = Fpm::new("bootstrap");
    let (nodes, edges) = parse_dot(&f.ok(&["graph", "greeter"]));
    let has = |a: &str, b: &str| edges.contains(&(a.to_string(), b.to_string()));
    // seed, then the imported modules, then their compiled form
    assert!(has("module-import-compiled.drv", "module-import.drv"));
    assert!(has("bootstrap-tools-0.drv", "bootstrap-tools.tar.drv"));
    assert!(has("bootstrap-tools-0.drv", "module-import-compiled.drv"));
    assert!(has("shell-boot1-1.0.drv", "bootstrap-tools-0.drv"));
    assert!(has("greeter-1.0.drv", "shell-boot1-1.0.drv"));
    assert!(!has("greeter-1.0.drv", "bootstrap-tools-0.drv"));
    assert_eq!(nodes.len(), 9, "{nodes:?}");
}

#[test]
fn bootstrapped_package_installs() {
    let f = Fpm::new("bootstrap");
    f.ok(&["package", "--install", "greeter"]);
    let greet = f.dir.path().join("state/profiles/alice/profile/bin/greet");
    let text = std::fs::read_to_string(&greet).unwrap();
    let (shebang, body) = text.split_once('\n').unwrap();
    // the interpreter is the stage-one shell, not the seed
    assert!(Regex::new(r"^#!/.*/[0-9a-z]{32}-shell-boot1-1\.0/bin/sh$").unwrap().is_match(shebang), "{shebang}");
    assert_eq!(body, "echo 'Hello from the bootstrapped world'\n");
}
