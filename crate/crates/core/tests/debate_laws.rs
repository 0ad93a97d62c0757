use std::sync::Arc;

use hopdebate_core::debate::{run_debate, DebateConfig, JUDGE_REPAIR_TAG};
use hopdebate_core::gateway::{Gateway, MockBackend, MockRule};
use hopdebate_core::model::{plan_validate, Question, QuestionType, Role, SourceMode};
use hopdebate_core::operators::AdaptiveRouting;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PLAN: &str = r#"{"steps":[{"operator":"SubStep","directive":"split"},{"operator":"SingleStep","directive":"look up","depends_on":[0]}]}"#;

fn sentinel(role: Role, round: u32, salt: u32) -> String {
    format!("SENTINEL-{role:?}-R{round}-{salt}")
}

fn round_of(prompt: &str) -> u32 {
    let at = prompt.find("Current round: ").expect("round line") + "Current round: ".len();
    prompt[at..].split_whitespace().next().unwrap().parse().unwrap()
}

/// Debater rules answering with a sentinel unique to (role, round).
fn sentinel_rules(max_rounds: u32, salt: u32) -> Vec<MockRule> {
    let mut rules = Vec::new();
    for t in 1..=max_rounds {
        for role in Role::DEBATERS {
            rules.push(
                MockRule::new(role.tag(), format!("I think {} is right.", sentinel(role, t, salt)))
                    .containing(format!("Current round: {t} of")),
            );
        }
    }
    rules
}

#[test]
fn round_limit_and_soft_mode_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let routing = AdaptiveRouting::default();
    for case in 0..30 {
        let r = 1 + case % 3;
        let salt: u32 = rng.random();
        let mut rules = sentinel_rules(r, salt);
        let hard_reply = if rng.random_bool(0.5) { "CONTINUE".to_string() } else { format!("Still unclear {salt}") };
        let soft_reply = if rng.random_bool(0.5) { PLAN.to_string() } else { "no plan".to_string() };
        rules.push(MockRule::new("debate.judge", soft_reply).containing("You must end the discussion"));
        rules.push(MockRule::new("debate.judge", hard_reply));
        rules.push(MockRule::new(JUDGE_REPAIR_TAG, "still nothing"));
        let gw = Gateway::new(Arc::new(MockBackend::new(rules)));
        let cfg = DebateConfig { max_rounds: r, ..DebateConfig::default() };
        let q = Question::new(format!("q{case}"), "Which came first, the film or the novel?");
        let (plan, transcript) = run_debate(&q, &QuestionType::new("Temporal"), &cfg, &gw, &routing).unwrap();
        assert_eq!(plan.rounds_used, r, "case {case}");
        assert_eq!(plan.source_mode, SourceMode::Soft, "case {case}");
        assert!(plan_validate(&plan, &cfg).is_empty());
        assert_eq!(transcript.rounds(), r);
        for role in Role::DEBATERS {
            assert_eq!(transcript.history(role).count() as u32, r);
        }
        assert!(transcript.is_well_ordered());
        assert_eq!(transcript.total_usage(), gw.ledger().total());
    }
}

#[test]
fn causal_information_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let routing = AdaptiveRouting::default();
    let mut violations = Vec::new();
    for case in 0..50 {
        let salt: u32 = rng.random();
        let stop_at: u32 = rng.random_range(1..=3);
        let mut rules = sentinel_rules(3, salt);
        if stop_at < 3 {
            rules.push(MockRule::new("debate.judge", PLAN).containing(format!("Current round: {stop_at} of")));
        }
        rules.push(MockRule::new("debate.judge", PLAN).containing("You must end the discussion"));
        rules.push(MockRule::new("debate.judge", "CONTINUE"));
        let mock = Arc::new(MockBackend::new(rules));
        let gw = Gateway::new(mock.clone());
        let q = Question::new(format!("q{case}"), "Where was the author of the novel born?");
        let (plan, _) = run_debate(&q, &QuestionType::new("Inference"), &DebateConfig::default(), &gw, &routing).unwrap();
        assert_eq!(plan.rounds_used, stop_at);

        for req in mock.requests() {
            let prompt = req.joined_content();
            let t = round_of(&prompt);
            let forbidden: Vec<Role> = match req.tag.as_str() {
                "debate.affirmative" => vec![Role::Affirmative, Role::Negative, Role::Fast, Role::Slow],
                "debate.negative" => vec![Role::Negative, Role::Fast, Role::Slow],
                "debate.fast" => vec![Role::Fast, Role::Slow],
                "debate.slow" => vec![Role::Slow],
                _ => vec![],
            };
            for role in forbidden {
                if prompt.contains(&sentinel(role, t, salt)) {
                    violations.push(format!("case {case}: {} prompt in round {t} saw {role:?}", req.tag));
                }
            }
            for later in (t + 1)..=3 {
                for role in Role::DEBATERS {
                    if prompt.contains(&sentinel(role, later, salt)) {
                        violations.push(format!("case {case}: {} round {t} saw round {later}", req.tag));
                    }
                }
            }
            let required: Vec<(Role, u32)> = match req.tag.as_str() {
                "debate.affirmative" if t > 1 => vec![(Role::Fast, t - 1), (Role::Slow, t - 1), (Role::Affirmative, t - 1)],
                "debate.negative" => {
                    let mut v = vec![(Role::Affirmative, t)];
                    if t > 1 {
                        v.extend([(Role::Fast, t - 1), (Role::Slow, t - 1)]);
                    }
                    v
                }
                "debate.fast" => vec![(Role::Affirmative, t), (Role::Negative, t)],
                "debate.slow" => vec![(Role::Affirmative, t), (Role::Negative, t), (Role::Fast, t)],
                _ => vec![],
            };
            for (role, round) in required {
                if !prompt.contains(&sentinel(role, round, salt)) {
                    violations.push(format!("case {case}: {} round {t} missing {role:?} R{round}", req.tag));
                }
            }
            if req.tag == "debate.fast" && t > 1 && prompt.contains(&sentinel(Role::Slow, t - 1, salt)) {
                violations.push(format!("case {case}: fast prompt in round {t} saw slow content"));
            }
        }
    }
    assert!(violations.is_empty(), "{violations:#?}");
}

#[test]
fn identical_scripts_give_identical_debates() {
    let routing = AdaptiveRouting::default();
    let run = || {
        let mut rules = sentinel_rules(3, 1);
        rules.push(MockRule::new("debate.judge", PLAN).containing("Current round: 2 of"));
        rules.push(MockRule::new("debate.judge", "CONTINUE"));
        let mock = Arc::new(MockBackend::new(rules));
        let gw = Gateway::new(mock.clone());
        let q = Question::new("q", "Where was the author of the novel born?");
        let out = run_debate(&q, &QuestionType::new("Inference"), &DebateConfig::default(), &gw, &routing).unwrap();
        let prompts: Vec<String> = mock.requests().iter().map(|r| r.joined_content()).collect();
        (serde_json::to_string(&out).unwrap(), prompts)
    };
    assert_eq!(run(), run());
}

#[test]
fn extra_debaters_are_concatenated_for_the_next_level() {
    let routing = AdaptiveRouting::default();
    let rules = vec![
        MockRule::new("debate.affirmative", "AFF-SEAT-2").containing("seat 2 of 2"),
        MockRule::new("debate.affirmative", "AFF-SEAT-1"),
        MockRule::new("debate.negative", "NEG"),
        MockRule::new("debate.fast", "FAST"),
        MockRule::new("debate.slow", "SLOW"),
        MockRule::new("debate.judge", PLAN),
    ];
    let mock = Arc::new(MockBackend::new(rules));
    let gw = Gateway::new(mock.clone());
    let cfg = DebateConfig { first_level_debaters: 3, ..DebateConfig::default() };
    let q = Question::new("q", "Who is older?");
    let (_, t) = run_debate(&q, &QuestionType::new("Comparison"), &cfg, &gw, &routing).unwrap();
    assert_eq!(t.history(Role::Affirmative).count(), 2);
    assert_eq!(t.history(Role::Negative).count(), 1);
    let neg = mock.requests().into_iter().find(|r| r.tag == "debate.negative").unwrap();
    assert!(neg.joined_content().contains("AFF-SEAT-1\n\nAFF-SEAT-2"));
}
