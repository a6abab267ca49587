//! Bundled inputs for tests, examples and smoke runs.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::rng;
use crate::types::{Label, PatchSample};

/// Linux kernel (sunrpc) change enabling asynchronous I/O on transport
/// sockets: three hunks, one added line each.
pub const SOCK_FASYNC_PATCH: &str = r#"@@ -1950,6 +1950,7 @@ static int xs_local_finish_connecting(struct rpc_xprt *xprt,
        sk->sk_user_data = xprt;
        sk->sk_data_ready = xs_data_ready;
        sk->sk_write_space = xs_udp_write_space;
+		sock_set_flag(sk, SOCK_FASYNC);
        sk->sk_error_report = xs_error_report;
        sk->sk_allocation = GFP_NOIO;

@@ -2136,6 +2137,7 @@ static void xs_udp_finish_connecting(struct rpc_xprt *xprt, struct socket *sock)
        sk->sk_user_data = xprt;
        sk->sk_data_ready = xs_data_ready;
        sk->sk_write_space = xs_udp_write_space;
+		sock_set_flag(sk, SOCK_FASYNC);
        sk->sk_allocation = GFP_NOIO;

        xprt_set_connected(xprt);

@@ -2237,6 +2239,7 @@ static int xs_tcp_finish_connecting(struct rpc_xprt *xprt, struct socket *sock)
        sk->sk_data_ready = xs_tcp_data_ready;
        sk->sk_state_change = xs_tcp_state_change;
        sk->sk_write_space = xs_tcp_write_space;
+		sock_set_flag(sk, SOCK_FASYNC);
        sk->sk_error_report = xs_error_report;
        sk->sk_allocation = GFP_NOIO;
"#;

const DIRS: &[&str] = &["net/core", "fs/ext4", "drivers/usb", "kernel/bpf", "lib/parser", "crypto"];
const FUNCS: &[&str] = &[
    "read_header", "handle_packet", "parse_options", "copy_chunk", "load_table", "decode_frame",
    "set_config", "update_entry",
];
const TYPES: &[&str] = &["sk_buff", "inode", "urb", "bpf_map", "parser_ctx", "cipher_req"];

const SEC_CHECKS: &[&str] = &[
    "len > MAX_BUF_LEN",
    "offset + len < offset",
    "idx >= ARRAY_SIZE(table)",
    "!access_ok(ubuf, len)",
    "size > remaining || size == 0",
    "count > INT_MAX / elem_size",
];
const SEC_RETURNS: &[&str] = &["-EINVAL", "-EFAULT", "-EOVERFLOW", "-E2BIG"];
const SEC_MESSAGES: &[&str] = &[
    "Fix out-of-bounds read in {f}",
    "Prevent integer overflow when computing buffer size in {f}",
    "Validate user supplied length before copy in {f}",
    "Reject oversized input to avoid heap overflow in {f}",
];

const PLAIN_CALLS: &[&str] = &[
    "pr_debug(\"{f}: entering\\n\");",
    "trace_{f}_start(ctx);",
    "stats_inc(&ctx->calls);",
    "log_verbose(ctx, \"{f}\");",
];
const PLAIN_MESSAGES: &[&str] = &[
    "Add debug logging to {f}",
    "Refactor {f} return path",
    "Track call statistics in {f}",
    "Tidy up tracing in {f}",
];

/// Generates a balanced, linearly separable set of synthetic patches.
///
/// Security samples add a bounds check with an early error return; the
/// others add logging or tracing and reroute the return value. `shift`
/// selects a disjoint identifier pool so two sets can stand in for
/// different projects.
pub fn synthetic_dataset(n: usize, seed: u64, source: &str, shift: bool) -> Vec<PatchSample> {
    let mut rng = rng::substream(seed, "synthetic", u64::from(shift));
    let (funcs, dirs) = if shift {
        (&FUNCS[4..], &DIRS[3..])
    } else {
        (&FUNCS[..4], &DIRS[..3])
    };
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Security } else { Label::NonSecurity };
            let func = *funcs.choose(&mut rng).unwrap();
            let dir = *dirs.choose(&mut rng).unwrap();
            let ty = *TYPES.choose(&mut rng).unwrap();
            let start = rng.random_range(10..2000);
            let path = format!("{dir}/{func}.c");
            let header = format!(
                "diff --git a/{path} b/{path}\n--- a/{path}\n+++ b/{path}\n"
            );
            let (diff, message) = match label {
                Label::Security => {
                    let check = SEC_CHECKS.choose(&mut rng).unwrap();
                    let ret = SEC_RETURNS.choose(&mut rng).unwrap();
                    let body = format!(
                        "@@ -{start},4 +{start},6 @@ static int {func}(struct {ty} *ctx, size_t len)\n \
                         {{\n \tint err = 0;\n+\tif ({check})\n+\t\treturn {ret};\n \terr = do_work(ctx, len);\n \treturn err;\n"
                    );
                    let msg = SEC_MESSAGES.choose(&mut rng).unwrap().replace("{f}", func);
                    (header + &body, msg)
                }
                Label::NonSecurity => {
                    let call = PLAIN_CALLS.choose(&mut rng).unwrap().replace("{f}", func);
                    let body = format!(
                        "@@ -{start},4 +{start},5 @@ static int {func}(struct {ty} *ctx, size_t len)\n \
                         {{\n \tint err = 0;\n+\t{call}\n \terr = do_work(ctx, len);\n-\treturn err;\n+\treturn {func}_finish(err);\n"
                    );
                    let msg = PLAIN_MESSAGES.choose(&mut rng).unwrap().replace("{f}", func);
                    (header + &body, msg)
                }
            };
            PatchSample {
                id: format!("{source}-{i:04}"),
                diff_text: diff,
                description: Some(message),
                explanation: None,
                label,
                source: source.to_string(),
            }
        })
        .collect()
}
