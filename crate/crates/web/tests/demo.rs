use p2pgrid_web::{clear_json, feeder, losses_json, profile_json};
use serde_json::Value;

const CLEARED_EXAMPLE: &str = "seller_bus,buyer_bus,power_kw\n2,3,2.8\n2,6,1.4\n5,14,3.7\n4,19,3.5\n";

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn bundled_feeder_is_the_shipped_one() {
    let net = feeder();
    assert_eq!(net.bus_count(), 27);
    assert_eq!(net.branch_count(), 26);
}

#[test]
fn clears_the_example_market() {
    let request = r#"{
        "offers": [
            {"seller": "S1", "price": 17, "quantity": 3.7, "bcro": 4},
            {"seller": "S2", "price": 15, "quantity": 4.2, "bcro": 5},
            {"seller": "S3", "price": 16, "quantity": 3.5, "bcro": 3}
        ],
        "bids": [
            {"buyer": "B1", "price": 15, "quantity": 6.4, "bcro": 2},
            {"buyer": "B2", "price": 14, "quantity": 5.0, "bcro": 1}
        ]
    }"#;
    let v = parse(&clear_json(request).unwrap());
    assert_eq!(v["result"]["transactions"].as_array().unwrap().len(), 4);
    assert!((v["traded_kw"].as_f64().unwrap() - 11.4).abs() < 1e-9);
    assert_eq!(v["result"]["avg_buyer_price"]["B2"], 14.75);
}

#[test]
fn market_errors_come_back_as_messages() {
    let dup = r#"{"bids": [
        {"buyer": "A", "price": 15, "quantity": 1, "bcro": 1},
        {"buyer": "B", "price": 15, "quantity": 1, "bcro": 1}
    ]}"#;
    assert!(clear_json(dup).unwrap_err().contains("order"));
    assert!(clear_json("not json").is_err());
}

#[test]
fn profile_flags_and_curtails_when_scaled() {
    let calm = parse(&profile_json(CLEARED_EXAMPLE, 1.0, 0.94, 1.10, true).unwrap());
    assert_eq!(calm["voltages"].as_object().unwrap().len(), 27);
    assert!(calm["violations"].as_array().unwrap().is_empty());
    assert!(calm["curtailed_voltages"].is_null());

    let hot = parse(&profile_json(CLEARED_EXAMPLE, 2.5, 0.94, 1.10, true).unwrap());
    assert!(!hot["violations"].as_array().unwrap().is_empty());
    let after = hot["curtailed_voltages"].as_object().unwrap();
    assert!(after.values().all(|v| v.as_f64().unwrap() <= 1.10));
    assert!(hot["curtailed_kw"]["5"].as_f64().unwrap() > 0.0);

    let uncurtailed = parse(&profile_json(CLEARED_EXAMPLE, 2.5, 0.94, 1.10, false).unwrap());
    assert!(uncurtailed["curtailed_voltages"].is_null());
}

#[test]
fn profile_rejects_bad_input() {
    assert!(profile_json(CLEARED_EXAMPLE, 1.0, 1.05, 1.10, true).is_err());
    assert!(profile_json("seller_bus,buyer_bus,power_kw\n2,99,1\n", 1.0, 0.94, 1.10, true).is_err());
    assert!(profile_json(CLEARED_EXAMPLE, f64::NAN, 0.94, 1.10, true).is_err());
}

#[test]
fn nearby_trade_loses_less() {
    let near = parse(&losses_json(26, 27, 5.0).unwrap());
    let far = parse(&losses_json(6, 27, 5.0).unwrap());
    let (n, f) = (near["transaction_losses_kw"].as_f64().unwrap(), far["transaction_losses_kw"].as_f64().unwrap());
    assert!(n < f);
    assert!((n - 0.016151579287).abs() < 1e-6);
    assert!(near["path_resistance_ohm"].as_f64().unwrap() < far["path_resistance_ohm"].as_f64().unwrap());
    assert!(far["yearly_cost_high"].as_f64().unwrap() > far["yearly_cost_low"].as_f64().unwrap());
    assert!(losses_json(6, 27, 0.0).is_err());
    assert!(losses_json(6, 1, 1.0).is_err());
}
