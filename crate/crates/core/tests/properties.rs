mod common;

use common::*;
use guiagent_core::actions::{
    accuracy_reward, normalize_text, point_accuracy, relaxed_text_match, swipe_direction, Action,
    BBox, GroundTruthStep, MatchConfig, Point,
};
use guiagent_core::eval::{pass_at_k, Attempt, RunRecord, ToolCounts};
use guiagent_core::objective::{clipped_objective, clipped_term, k3, sft_loss};
use guiagent_core::protocol::{format_reward, parse_turn, render_turn, strip_results};
use guiagent_core::reward::{discounted_returns, group_advantages, pad_returns};
use guiagent_core::{ObjectiveConfigF64, TokenBatchF64, TokenRecordF64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_point() -> impl Strategy<Value = Point> {
    (0u32..2000, 0u32..3000).prop_map(|(x, y)| Point::new(x as f64, y as f64))
}

fn token() -> impl Strategy<Value = TokenRecordF64> {
    (-20.0f64..0.0, -20.0f64..0.0, -20.0f64..0.0, -5.0f64..5.0).prop_map(|(c, o, r, a)| {
        TokenRecordF64 {
            i: 0,
            t: 0,
            k: 0,
            logp_current: c,
            logp_old: o,
            logp_ref: r,
            advantage: a,
        }
    })
}

fn returns_group() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..10, 1usize..6).prop_flat_map(|(g, t)| {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, t), g)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn turns_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let turn = rand_turn(&mut rng);
        let text = render_turn(&turn);
        prop_assert_eq!(parse_turn(&text), Ok(turn));
        prop_assert_eq!(format_reward(&text), 1);
    }

    #[test]
    fn format_reward_matches_parse(s in ".{0,200}") {
        prop_assert_eq!(format_reward(&s), u8::from(parse_turn(&s).is_ok()));
    }

    #[test]
    fn stripping_results_leaves_no_result_tag(s in "(<result>|</result>|[a-z ]){0,40}") {
        let out = strip_results(&s);
        prop_assert!(!out.contains("<result>"));
    }

    #[test]
    fn swipe_direction_is_scale_invariant(a in grid_point(), b in grid_point(), s in 1u32..50) {
        prop_assume!(a != b);
        let k = s as f64;
        let scaled = swipe_direction(
            Point::new(a.x * k, a.y * k),
            Point::new(b.x * k, b.y * k),
        );
        prop_assert_eq!(swipe_direction(a, b), scaled);
    }

    #[test]
    fn point_accuracy_monotone_in_tolerance(
        p in grid_point(),
        c in grid_point(),
        w in 1u32..400,
        h in 1u32..400,
        d in 1.0f64..100.0,
        extra in 0.0f64..100.0,
        f in 1.0f64..2.0,
        df in 0.0f64..1.0,
    ) {
        let (w, h) = (w as f64, h as f64);
        let gt = GroundTruthStep::new(Action::Click { coordinate: c })
            .with_bbox(BBox::new(c.x - w / 2.0, c.y - h / 2.0, c.x + w / 2.0, c.y + h / 2.0));
        let tight = MatchConfig { click_distance_threshold: d, bbox_enlarge_factor: f };
        let loose = MatchConfig { click_distance_threshold: d + extra, bbox_enlarge_factor: f + df };
        let a = point_accuracy(p, &gt, &tight).unwrap();
        let b = point_accuracy(p, &gt, &loose).unwrap();
        prop_assert!(a <= b);
        prop_assert_eq!(point_accuracy(c, &gt, &tight).unwrap(), 1);
    }

    #[test]
    fn relaxed_match_ignores_case_and_spacing(words in prop::collection::vec("[a-zA-Z0-9]{1,6}", 1..5), pad in "[ \t]{0,3}") {
        let plain = words.join(" ");
        let noisy = format!("{pad}{}{pad}", words.join(&format!(" {pad}")).to_uppercase());
        prop_assert_eq!(relaxed_text_match(&plain, &noisy), 1);
        prop_assert_eq!(normalize_text(&noisy), plain.to_lowercase());
    }

    #[test]
    fn accuracy_agrees_with_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = KINDS[(seed % KINDS.len() as u64) as usize];
        let gt = rand_ground_truth(&mut rng, kind);
        let pred = rand_prediction(&mut rng, &gt);
        let cfg = rand_match_config(&mut rng);
        prop_assert_eq!(accuracy_reward(&pred, &gt, &cfg).unwrap(), accuracy_oracle(&pred, &gt, &cfg));
    }

    #[test]
    fn advantages_are_affine_invariant(
        rows in returns_group(),
        a in 0.01f64..100.0,
        b in -50.0f64..50.0,
    ) {
        let base = group_advantages(rows.clone(), 0.95, 1e-8).unwrap();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| a * x + b).collect()).collect();
        let other = group_advantages(moved, 0.95, 1e-8).unwrap();
        for (c, deg) in base.degenerate_columns.iter().enumerate() {
            if *deg || other.degenerate_columns[c] {
                continue;
            }
            for i in 0..rows.len() {
                prop_assert!((base.advantages[i][c] - other.advantages[i][c]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn advantage_columns_are_standardized(rows in returns_group()) {
        let adv = group_advantages(rows.clone(), 1.0, 1e-8).unwrap();
        let g = rows.len() as f64;
        for c in 0..adv.steps() {
            let col: Vec<f64> = adv.advantages.iter().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / g;
            prop_assert!(mean.abs() < 1e-9);
            if !adv.degenerate_columns[c] {
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g;
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn returns_satisfy_recurrence(rewards in prop::collection::vec(0.0f64..1.0, 0..40), gamma in 0.01f64..=1.0) {
        let r = discounted_returns(&rewards, gamma);
        prop_assert_eq!(r.len(), rewards.len());
        for t in 0..rewards.len() {
            let next = r.get(t + 1).copied().unwrap_or(0.0);
            prop_assert_eq!(r[t], rewards[t] + gamma * next);
        }
    }

    #[test]
    fn padding_keeps_rows_aligned(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 0..6), 1..6)) {
        let longest = rows.iter().map(Vec::len).max().unwrap();
        let padded = pad_returns(rows.clone());
        for (p, r) in padded.iter().zip(&rows) {
            prop_assert_eq!(p.len(), longest);
            prop_assert_eq!(&p[..r.len()], &r[..]);
            prop_assert!(p[r.len()..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn pass_at_k_is_monotone(outcomes in prop::collection::vec(any::<bool>(), 1..12)) {
        let record = RunRecord {
            task_id: "t".into(),
            attempts: outcomes.iter().map(|&success| Attempt {
                success,
                steps: 1,
                tool_calls_by_role: ToolCounts::default(),
            }).collect(),
        };
        let mut prev = 0;
        for k in 1..=outcomes.len() {
            let p = pass_at_k(&record, k).unwrap();
            prop_assert!(p >= prev);
            prop_assert_eq!(p, u8::from(outcomes[..k].iter().any(|&s| s)));
            prev = p;
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_reference(x in -30.0f64..30.0, tokens in prop::collection::vec(token(), 1..20)) {
        prop_assert!(k3(x) >= 0.0);
        let cfg = ObjectiveConfigF64::default();
        let v = clipped_objective(&TokenBatchF64::new(tokens.clone()), &cfg).unwrap();
        prop_assert!(v.kl >= 0.0);
        let same: Vec<TokenRecordF64> = tokens.iter().map(|t| TokenRecordF64 { logp_ref: t.logp_current, ..*t }).collect();
        let v = clipped_objective(&TokenBatchF64::new(same), &cfg).unwrap();
        prop_assert_eq!(v.kl, 0.0);
        prop_assert_eq!(v.total, v.surrogate);
    }

    #[test]
    fn clipped_term_is_pessimistic(t in token(), eps in 0.01f64..0.99) {
        let rho = (t.logp_current - t.logp_old).exp();
        let term = clipped_term(&t, eps);
        prop_assert!(term <= rho * t.advantage + 1e-12);
        if t.advantage >= 0.0 {
            prop_assert!(term <= (1.0 + eps) * t.advantage + 1e-12);
        } else {
            prop_assert!(term <= (1.0 - eps) * t.advantage + 1e-12);
        }
    }

    #[test]
    fn zero_beta_total_is_surrogate(tokens in prop::collection::vec(token(), 1..20)) {
        let cfg = ObjectiveConfigF64 { kl_beta: 0.0, ..ObjectiveConfigF64::default() };
        let v = clipped_objective(&TokenBatchF64::new(tokens), &cfg).unwrap();
        prop_assert_eq!(v.total, v.surrogate);
    }

    #[test]
    fn sft_loss_is_mean_nll(logps in prop::collection::vec(-10.0f64..0.0, 1..50)) {
        let want = -logps.iter().sum::<f64>() / logps.len() as f64;
        prop_assert!((sft_loss(&logps).unwrap() - want).abs() < 1e-12);
    }
}
