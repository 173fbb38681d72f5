//! End-to-end registration flows through the full node graph.

use imsim::runner::{FlowOutcome, Runner};
use imsim::scenario::parse_str;

const BASE: &str = "\
DOMAIN home.net
NODE TERMINAL t1 DOMAIN home.net
NODE PCSCF pcscf1 DOMAIN home.net
NODE ICSCF icscf1 DOMAIN home.net
NODE SCSCF scscf1 DOMAIN home.net
NODE HSS hss1 DOMAIN home.net
LINK t1 pcscf1 LATENCY 1
LINK pcscf1 icscf1 LATENCY 1
LINK pcscf1 scscf1 LATENCY 1
LINK icscf1 scscf1 LATENCY 1
LINK icscf1 hss1 LATENCY 1
LINK scscf1 hss1 LATENCY 1
USER john PRIVATE john@home.net PUBLIC sip:john@home.net PUBLIC tel:+15550001 SECRET sj MEDIA audio,video HOME t1
";

#[test]
fn successful_registration_completes_the_task_list() {
    let text = format!("{BASE}ACTION register john VIA t1\n");
    let scenario = parse_str(&text).unwrap();
    let mut runner = Runner::new(scenario, 0);
    let report = runner.run_to_completion();
    let world = runner.world();
    let now = runner.sim().now();

    // Bind a public identity to a contact address, for the whole
    // implicit set.
    let bindings = world.bindings_of("john", now);
    assert_eq!(bindings.len(), 2, "sip and tel ids bind together");
    assert!(bindings.iter().all(|b| b.contact.as_str() == "t1"));
    assert!(bindings.iter().all(|b| b.compression_negotiated));

    // S-CSCF assignment recorded in the HSS.
    assert_eq!(
        world.assigned_scscf_of("john", now).unwrap().as_str(),
        "scscf1"
    );

    // Security association established at the P-CSCF.
    let sa = world.security_association(&"t1".into());
    assert!(sa.is_some());

    // Challenge round trip and mutual authentication visible in the trace.
    assert!(report.trace.contains("SIP-RESPONSE-401"));
    assert!(report.trace.contains("net-auth=ok"));
    assert!(report.trace.contains("flow=reg-1 registered"));
    assert!(report.trace.contains("X-ANSWERS=REGISTER"));
    assert!(report
        .trace
        .contains("associated=sip:john@home.net,tel:+15550001"));

    // Registration charging at the three CSCFs.
    let summary = imsim::charging::correlate(world.cdr_log(), "reg-1");
    let nodes: Vec<&str> = summary.node_ids.iter().map(|n| n.as_str()).collect();
    assert_eq!(nodes, vec!["icscf1", "pcscf1", "scscf1"]);
}

#[test]
fn wrong_secret_fails_with_no_partial_state() {
    let text = format!("{BASE}ACTION register john VIA t1 SECRET wrong\n");
    let scenario = parse_str(&text).unwrap();
    let mut runner = Runner::new(scenario, 0);
    let report = runner.run_to_completion();
    let world = runner.world();
    let now = runner.sim().now();

    assert_eq!(report.exit_code, 0, "no expects declared");
    assert!(report.trace.contains("net-auth=mismatch"));
    assert!(report.trace.contains("rejected reason=AuthFailed"));
    assert!(world.bindings_of("john", now).is_empty());
    assert!(world.assigned_scscf_of("john", now).is_none());
    assert!(world.security_association(&"t1".into()).is_none());
}

#[test]
fn barred_user_is_refused_authorization() {
    let text = BASE.replace(
        "MEDIA audio,video HOME t1",
        "MEDIA audio,video HOME t1 BARRED",
    ) + "ACTION register john VIA t1\n";
    let scenario = parse_str(&text).unwrap();
    let mut runner = Runner::new(scenario, 0);
    let report = runner.run_to_completion();
    let world = runner.world();
    let now = runner.sim().now();

    assert!(report.trace.contains("rejected reason=Barred"));
    assert!(world.bindings_of("john", now).is_empty());
    assert!(world.assigned_scscf_of("john", now).is_none());
}

#[test]
fn downed_core_link_times_out_without_partial_state() {
    let text = format!("{BASE}LINK-DOWN pcscf1 icscf1\nACTION register john VIA t1\n");
    let scenario = parse_str(&text).unwrap();
    let mut runner = Runner::new(scenario, 0);
    let report = runner.run_to_completion();
    let world = runner.world();
    let now = runner.sim().now();

    assert!(report.trace.contains("DROP"));
    assert!(report.trace.contains("flow=reg-1 timeout"));
    assert!(world.bindings_of("john", now).is_empty());
    assert!(world.assigned_scscf_of("john", now).is_none());
    assert!(world.security_association(&"t1".into()).is_none());
}

#[test]
fn reregistration_refreshes_and_keeps_the_scscf() {
    let text = format!("{BASE}ACTION register john VIA t1\nACTION register john VIA t1\n");
    let scenario = parse_str(&text).unwrap();
    let mut runner = Runner::new(scenario, 0);
    let report = runner.run_to_completion();
    let world = runner.world();
    let now = runner.sim().now();

    assert!(report.trace.contains("flow=reg-2 registered"));
    assert_eq!(
        world.assigned_scscf_of("john", now).unwrap().as_str(),
        "scscf1"
    );
    // Still exactly one binding per (public id, contact).
    assert_eq!(world.bindings_of("john", now).len(), 2);
    let registered: Vec<_> = world
        .flows()
        .values()
        .filter(|f| f.outcome == FlowOutcome::Registered)
        .collect();
    assert_eq!(registered.len(), 2);
}

#[test]
fn two_scscfs_balance_by_binding_count() {
    let text = "\
DOMAIN home.net
NODE TERMINAL t1 DOMAIN home.net
NODE TERMINAL t2 DOMAIN home.net
NODE PCSCF pcscf1 DOMAIN home.net
NODE ICSCF icscf1 DOMAIN home.net
NODE SCSCF scscf1 DOMAIN home.net
NODE SCSCF scscf2 DOMAIN home.net
NODE HSS hss1 DOMAIN home.net
LINK t1 pcscf1 LATENCY 1
LINK t2 pcscf1 LATENCY 1
LINK pcscf1 icscf1 LATENCY 1
LINK pcscf1 scscf1 LATENCY 1
LINK pcscf1 scscf2 LATENCY 1
LINK icscf1 scscf1 LATENCY 1
LINK icscf1 scscf2 LATENCY 1
LINK icscf1 hss1 LATENCY 1
LINK scscf1 hss1 LATENCY 1
LINK scscf2 hss1 LATENCY 1
USER amy PRIVATE amy@home.net PUBLIC sip:amy@home.net SECRET sa MEDIA audio
USER bob PRIVATE bob@home.net PUBLIC sip:bob@home.net SECRET sb MEDIA audio
ACTION register amy VIA t1
ACTION register bob VIA t2
EXPECT scscf amy scscf1
EXPECT scscf bob scscf2
";
    let scenario = parse_str(text).unwrap();
    let report = Runner::new(scenario, 0).run();
    assert_eq!(
        report.exit_code,
        0,
        "expects failed:\n{}",
        render_failures(&report)
    );
}

fn render_failures(report: &imsim::RunReport) -> String {
    report
        .expects
        .iter()
        .filter(|e| !e.passed)
        .map(|e| format!("{}: {}", e.description, e.detail))
        .collect::<Vec<_>>()
        .join("\n")
}
