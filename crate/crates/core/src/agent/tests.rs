use super::*;
use crate::autodiff::{finite_difference, relative_error};
use crate::env::{Atom, Bag};
use crate::so3::{random_rotation, random_unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(elements: &[&str]) -> AgentConfig {
    AgentConfig {
        elements: elements.iter().map(|s| s.to_string()).collect(),
        l_max: 2,
        channels_per_element: 2,
        hidden: 16,
        cg_layers: 2,
        mode_samples: 64,
        quadrature_order: 15,
        sunflower_points: 512,
        ..AgentConfig::default()
    }
}

fn el(s: &str) -> Element {
    ElementTable::builtin().lookup(s).unwrap()
}

fn state(atoms: &[(&str, Vec3)], bag: &[(&str, u32)]) -> EnvState {
    EnvState {
        canvas: Canvas::from_atoms(atoms.iter().map(|(s, p)| Atom::new(el(s), *p)).collect()),
        bag: Bag::from_counts(bag.iter().map(|(s, n)| (el(s), *n))),
        step_index: 0,
        energy: 0.0,
        horizon: 100,
    }
}

fn water_like() -> EnvState {
    state(
        &[
            ("O", Vec3::new(0.1, -0.2, 0.05)),
            ("H", Vec3::new(1.0, 0.0, 0.1)),
            ("H", Vec3::new(-0.3, 0.9, -0.2)),
        ],
        &[("C", 1), ("H", 2)],
    )
}

fn moved(s: &EnvState, rot: &Matrix3<f64>, shift: &Vec3) -> EnvState {
    EnvState {
        canvas: s.canvas.transformed(rot, shift),
        ..s.clone()
    }
}

#[test]
fn config_validation() {
    assert!(AgentConfig::default().validate().is_err());
    assert!(small_config(&["H"]).validate().is_ok());
    let mut c = small_config(&["H"]);
    c.d_min = 2.0;
    assert!(c.validate().is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Agent::new(small_config(&["H", "H"]), &mut rng).is_err());
    assert!(Agent::new(small_config(&["Qq"]), &mut rng).is_err());
}

#[test]
fn heads_are_invariant_and_orientation_covariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let agent = Agent::new(small_config(&["H", "C", "O"]), &mut rng).unwrap();
    let s = water_like();
    let rot = random_rotation(&mut rng);
    let shift = Vec3::new(0.4, 1.1, -2.0);
    let t = moved(&s, &rot, &shift);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
    assert!(close(&agent.focal_probs(&s).unwrap(), &agent.focal_probs(&t).unwrap()));
    assert!(close(&agent.element_probs(&s, 1).unwrap(), &agent.element_probs(&t, 1).unwrap()));
    let (ma, mb) = (
        agent.distance_mixture(&s, 0, el("C")).unwrap(),
        agent.distance_mixture(&t, 0, el("C")).unwrap(),
    );
    assert!(close(&ma.means, &mb.means) && close(&ma.weights, &mb.weights));
    assert!((agent.value(&s).unwrap() - agent.value(&t).unwrap()).abs() < 1e-9);
    let da = agent.orientation_density(&s, 0, el("C"), 1.2).unwrap();
    let db = agent.orientation_density(&t, 0, el("C"), 1.2).unwrap();
    for _ in 0..20 {
        let x = random_unit(&mut rng);
        assert!((da.log_density(&x) - db.log_density(&(rot * x))).abs() < 1e-8);
    }
}

#[test]
fn value_ignores_atom_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let agent = Agent::new(small_config(&["H", "O"]), &mut rng).unwrap();
    let s = state(&[("O", Vec3::zeros()), ("H", Vec3::new(1.0, 0.0, 0.0)), ("H", Vec3::new(0.0, 1.1, 0.0))], &[("H", 1)]);
    let p = state(&[("H", Vec3::new(0.0, 1.1, 0.0)), ("O", Vec3::zeros()), ("H", Vec3::new(1.0, 0.0, 0.0))], &[("H", 1)]);
    assert!((agent.value(&s).unwrap() - agent.value(&p).unwrap()).abs() < 1e-10);
    let fs = agent.focal_probs(&s).unwrap();
    let fp = agent.focal_probs(&p).unwrap();
    assert!((fs[0] - fp[1]).abs() < 1e-10 && (fs[2] - fp[0]).abs() < 1e-10);
}

#[test]
fn act_then_evaluate_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let agent = Agent::new(small_config(&["H", "C", "O"]), &mut rng).unwrap();
    let s = water_like();
    for _ in 0..5 {
        let a = agent.act(&s, ActMode::Sample, &mut rng).unwrap();
        assert!(a.element == el("C") || a.element == el("H"));
        let f = a.focal.unwrap();
        let rel = a.position - s.canvas.atoms()[f].position;
        assert!((rel.norm() - a.distance).abs() < 1e-12);
        assert!((a.orientation.norm() - 1.0).abs() < 1e-12);
        let ev = agent.evaluate(&s, &a).unwrap();
        assert!((ev.log_probs.total() - a.log_probs.total()).abs() < 1e-9);
        assert_eq!(ev.value, a.value);
        assert!(ev.entropy > 0.0);
    }
    let empty = state(&[], &[("O", 1)]);
    let a = agent.act(&empty, ActMode::Sample, &mut rng).unwrap();
    assert_eq!((a.element, a.position, a.focal), (el("O"), Vec3::zeros(), None));
    assert_eq!(a.log_probs.total(), 0.0);
}

#[test]
fn greedy_is_deterministic() {
    let agent = Agent::new(small_config(&["H", "C", "O"]), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let s = water_like();
    let a = agent.act(&s, ActMode::Greedy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = agent.act(&s, ActMode::Greedy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    let probs = agent.focal_probs(&s).unwrap();
    assert_eq!(a.focal, Some(argmax(&probs)));
}

#[test]
fn distance_clip() {
    assert_eq!(clip_distance(-0.5), 0.001);
    assert_eq!(clip_distance(0.0), 0.0);
    assert_eq!(clip_distance(1.3), 1.3);
}

#[test]
fn log_prob_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut agent = Agent::new(small_config(&["H", "O"]), &mut rng).unwrap();
    let s = state(&[("O", Vec3::zeros()), ("H", Vec3::new(0.9, 0.3, 0.0))], &[("H", 1), ("O", 1)]);
    let action = agent.act(&s, ActMode::Sample, &mut rng).unwrap();
    let loss = |agent: &Agent| -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let vars = agent.params.register(&tape);
        let ev = agent.evaluate_on_tape(&tape, &vars, &s, &action).unwrap();
        let total = tape.add(tape.add(ev.log_prob, ev.value), ev.entropy);
        let g = tape.backward(total).unwrap();
        (tape.scalar(total), agent.params.collect_grads(&g, &vars))
    };
    let (_, grads) = loss(&agent);
    let names = ["embed.0.mix.l1", "mdn.log_sigma", "tcov.l2", "focal.1.w", "critic.rho.0.b"];
    let mut checked = 0;
    for name in names {
        let Some(id) = agent.params.find(name) else { continue };
        checked += 1;
        let idx: Vec<usize> = (0..agent.params.get(id).data.len()).step_by(7).take(4).collect();
        let x0: Vec<f64> = idx.iter().map(|&i| agent.params.get(id).data[i]).collect();
        let fd = finite_difference(&x0, 1e-6, |x| {
            for (k, &i) in idx.iter().enumerate() {
                agent.params.get_mut(id).data[i] = x[k];
            }
            loss(&agent).0
        });
        for (k, &i) in idx.iter().enumerate() {
            agent.params.get_mut(id).data[i] = x0[k];
            let id_index = agent.params.iter().position(|p| p.name == name).unwrap();
            let err = relative_error(grads[id_index][i], fd[k], 1e-6);
            assert!(err < 1e-4, "{name}[{i}]: {} vs {}", grads[id_index][i], fd[k]);
        }
    }
    assert!(checked >= 3, "parameter names changed");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let agent = Agent::new(small_config(&["H", "O"]), &mut rng).unwrap();
    let text = agent.to_checkpoint();
    let back = Agent::from_checkpoint(&text, "mem").unwrap();
    assert_eq!(back.params, agent.params);
    assert_eq!(back.config, agent.config);
    assert!(Agent::from_checkpoint("nope", "mem").is_err());
    let broken = text.replacen("param", "parm", 1);
    assert!(Agent::from_checkpoint(&broken, "mem").is_err());
}
