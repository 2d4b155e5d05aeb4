mod common;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use common::{json, raw_request, upload_raw};

const KEY: &str = "cli-test-key-0123456789";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(policy: &str) -> Env {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("www")).unwrap();
        let vault = if policy == "outside-webroot" { "vault" } else { "www/docs" };
        std::fs::write(
            dir.path().join("vault.conf"),
            format!(
                "# test configuration\nVAULT_WEBROOT={}\nVAULT_DIR={}\nVAULT_POLICY={policy}\nVAULT_STORE={}\n",
                dir.path().join("www").display(),
                dir.path().join(vault).display(),
                dir.path().join("meta.journal").display(),
            ),
        )
        .unwrap();
        Env { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vault"));
        for (k, _) in std::env::vars() {
            if k.starts_with("VAULT_") {
                cmd.env_remove(k);
            }
        }
        cmd.env("VAULT_KEY", KEY)
            .arg("--config")
            .arg(self.path("vault.conf"))
            .args(args)
            .current_dir(self.dir.path());
        cmd
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn init_is_idempotent_and_reports_conflicts() {
    let env = Env::new("denied-subdir");
    let first = env.run(&["init"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let text = stdout(&first);
    assert!(text.starts_with("policy: denied-subdir\n"), "{text}");
    assert!(!text.contains("already compliant"));
    assert!(env.path("www/docs/.htaccess").is_file());
    assert!(env.path("www/docs/index.html").is_file());
    assert!(env.path("meta.journal").is_file());

    let again = env.run(&["init"]);
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("already compliant"));

    std::fs::write(env.path("www/docs/.htaccess"), "Allow from all\n").unwrap();
    let conflict = env.run(&["init"]);
    assert_eq!(code(&conflict), 1);
    assert_eq!(
        std::fs::read_to_string(env.path("www/docs/.htaccess")).unwrap(),
        "Allow from all\n"
    );
    let forced = env.run(&["init", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(
        std::fs::read_to_string(env.path("www/docs/.htaccess")).unwrap(),
        "Order Deny,Allow\nDeny from all\n"
    );
}

#[test]
fn flags_override_environment_which_overrides_file() {
    let env = Env::new("denied-subdir");
    let out = env
        .cmd(&["init"])
        .env("VAULT_POLICY", "obscured-subdir")
        .output()
        .unwrap();
    assert!(stdout(&out).starts_with("policy: obscured-subdir"), "{}", stdout(&out));
    assert!(!env.path("www/docs/.htaccess").exists());

    let out = env
        .cmd(&["--policy", "denied-subdir", "init"])
        .env("VAULT_POLICY", "obscured-subdir")
        .output()
        .unwrap();
    assert!(stdout(&out).starts_with("policy: denied-subdir"));
    assert!(env.path("www/docs/.htaccess").exists());
}

#[test]
fn bad_configuration_exits_with_environment_code() {
    let env = Env::new("outside-webroot");
    // vault inside the web root contradicts the policy
    let out = env.run(&["--vault-dir", "www/inner", "init"]);
    assert_eq!(code(&out), 2);
    let out = env.run(&["--policy", "sideways", "init"]);
    assert_eq!(code(&out), 2);
    let out = env.cmd(&["ls"]).env_remove("VAULT_KEY").output().unwrap();
    assert_eq!(code(&out), 2);
    let out = env.cmd(&["ls"]).env("VAULT_KEY", "short").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn token_lifecycle() {
    let env = Env::new("outside-webroot");
    assert_eq!(code(&env.run(&["init"])), 0);
    let created = env.run(&["token", "create", "--user", "alice", "--role", "admin"]);
    assert_eq!(code(&created), 0);
    let text = stdout(&created);
    let token_id = text
        .lines()
        .find_map(|l| l.strip_prefix("token_id: "))
        .unwrap()
        .to_string();
    let plaintext = text.lines().find_map(|l| l.strip_prefix("token: ")).unwrap();
    assert!(plaintext.starts_with(&format!("{token_id}.")));

    let listed = stdout(&env.run(&["token", "list"]));
    assert_eq!(listed, format!("{token_id}\talice\tadmin\n"));
    // the secret is never persisted in clear
    let journal = std::fs::read_to_string(env.path("meta.journal")).unwrap();
    assert!(!journal.contains(plaintext.split_once('.').unwrap().1));

    let revoked = env.run(&["token", "revoke", &token_id]);
    assert_eq!(code(&revoked), 0);
    let twice = env.run(&["token", "revoke", &token_id]);
    assert_eq!(code(&twice), 1);
    assert_eq!(stdout(&env.run(&["token", "list"])), "");
}

#[test]
fn ingest_ls_get_rm_fsck() {
    let env = Env::new("denied-subdir");
    assert_eq!(code(&env.run(&["init"])), 0);
    let src = env.path("input.pdf");
    std::fs::write(&src, b"%PDF-1.4 cli").unwrap();

    let mut ids = Vec::new();
    for owner in ["bob", "alice", "alice"] {
        let out = env.run(&["ingest", src.to_str().unwrap(), "--owner", owner]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        ids.push(stdout(&out).trim().to_string());
    }

    let ls1 = stdout(&env.run(&["ls"]));
    let ls2 = stdout(&env.run(&["ls"]));
    assert_eq!(ls1, ls2);
    assert_eq!(ls1.lines().count(), 3);
    let mut sorted: Vec<(String, String)> = ls1
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[3].to_string(), f[0].to_string())
        })
        .collect();
    let listed = sorted.clone();
    sorted.sort();
    assert_eq!(listed, sorted, "ls is ordered by timestamp then id");

    let alice = stdout(&env.run(&["ls", "--owner", "alice", "--json"]));
    let views: serde_json::Value = serde_json::from_str(&alice).unwrap();
    assert_eq!(views.as_array().unwrap().len(), 2);
    assert!(!alice.contains("opaque"));

    let fetched = env.path("out.pdf");
    let out = env.run(&["get", &ids[0], "-o", fetched.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&fetched).unwrap(), b"%PDF-1.4 cli");
    assert_eq!(env.run(&["get", &ids[0]]).stdout, b"%PDF-1.4 cli");

    let fsck = env.run(&["fsck"]);
    assert_eq!(code(&fsck), 0, "{}", stdout(&fsck));
    assert!(stdout(&fsck).ends_with("clean\n"));

    assert_eq!(code(&env.run(&["rm", &ids[0]])), 0);
    assert_eq!(code(&env.run(&["rm", &ids[0]])), 1);
    assert_eq!(code(&env.run(&["get", &ids[0]])), 1);
    assert_eq!(stdout(&env.run(&["ls"])).lines().count(), 2);

    // plant an orphan: fsck must flag it
    std::fs::write(env.path("www/docs/deadbeefdeadbeefdeadbeefdeadbeef.pdf"), b"x").unwrap();
    let fsck = env.run(&["fsck", "--json"]);
    assert_eq!(code(&fsck), 1);
    let report: serde_json::Value = serde_json::from_slice(&fsck.stdout).unwrap();
    assert_eq!(report["clean"], false);
    assert_eq!(report["sweep"]["orphan_blobs"].as_array().unwrap().len(), 1);
}

#[test]
fn fsck_reports_layout_violations() {
    let env = Env::new("denied-subdir");
    assert_eq!(code(&env.run(&["init"])), 0);
    std::fs::remove_file(env.path("www/docs/.htaccess")).unwrap();
    let fsck = env.run(&["fsck"]);
    assert_eq!(code(&fsck), 1);
    assert!(stdout(&fsck).contains("layout violation"));
    assert!(stdout(&fsck).ends_with("inconsistent\n"));
}

#[test]
fn audit_exit_codes() {
    let env = Env::new("denied-subdir");
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let out = env.run(&["audit", &format!("http://127.0.0.1:{port}/docs/")]);
    assert_eq!(code(&out), 2);
    let out = env.run(&["audit", "ftp://example.invalid/"]);
    assert_eq!(code(&out), 2);
    let out = env.run(&["audit", "--json", &format!("http://127.0.0.1:{port}/")]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["verdicts"]["R1_DirectAccess"], "Indeterminate");
}

fn spawn_serve(env: &Env) -> (std::process::Child, std::net::SocketAddr) {
    let mut child = env
        .cmd(&["--bind", "127.0.0.1:0", "serve"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .parse()
        .unwrap();
    (child, addr)
}

fn wait_ready(addr: std::net::SocketAddr) {
    for _ in 0..100 {
        if raw_request(addr, "GET", "/healthz", &[], b"").status == 200 {
            return;
        }
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    panic!("service never became ready");
}

fn token_for(env: &Env, user: &str) -> String {
    let out = stdout(&env.run(&["token", "create", "--user", user]));
    out.lines().find_map(|l| l.strip_prefix("token: ")).unwrap().to_string()
}

#[test]
fn serve_survives_hard_kill() {
    let env = Env::new("outside-webroot");
    assert_eq!(code(&env.run(&["init"])), 0);
    let token = token_for(&env, "alice");
    let (mut child, addr) = spawn_serve(&env);
    wait_ready(addr);
    let mut ids = Vec::new();
    for i in 0..10 {
        let resp = upload_raw(addr, &token, &format!("f{i}.txt"), format!("body {i}").as_bytes());
        assert_eq!(resp.status, 201);
        ids.push(json(&resp)["doc_id"].as_str().unwrap().to_string());
    }
    child.kill().unwrap();
    child.wait().unwrap();

    let ls = stdout(&env.run(&["ls"]));
    for id in &ids {
        assert!(ls.contains(id.as_str()));
    }
    assert_eq!(code(&env.run(&["fsck"])), 0);

    // the restarted service still honours the old token
    let (mut child, addr) = spawn_serve(&env);
    wait_ready(addr);
    let resp = raw_request(
        addr,
        "GET",
        &format!("/documents/{}", ids[3]),
        &[("Authorization", &format!("Bearer {token}"))],
        b"",
    );
    assert_eq!(resp.body, b"body 3");
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn second_writer_is_refused() {
    let env = Env::new("outside-webroot");
    assert_eq!(code(&env.run(&["init"])), 0);
    let (mut child, addr) = spawn_serve(&env);
    wait_ready(addr);
    let out = env.run(&["token", "create", "--user", "x"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(Path::new(&env.path("meta.journal")).is_file());
}
