//! Scene QA: accepted scenes re-verified independently, injected faults
//! rejected by the right checker, oversize targets scaled before judgment.

use rand::Rng;

use flowlab::rng::stream;
use flowlab::scenes::{generate_corpus, qa_check, Checker, CorpusConfig, QaConfig, SceneSpec, Verdict as QaVerdict};

use crate::{ensure, Verdict};

const CORPUS: usize = 200;
const FAULTS_PER_KIND: usize = 100;

/// Independent re-statement of every acceptance rule; returns the violated ones.
fn violations(s: &SceneSpec, q: &QaConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    let inside = |o: &flowlab::scenes::SceneObjectSpec| {
        let r = &o.region;
        r.center[0] - r.spread >= q.workspace_x[0]
            && r.center[0] + r.spread <= q.workspace_x[1]
            && r.center[1] - r.spread >= q.workspace_y[0]
            && r.center[1] + r.spread <= q.workspace_y[1]
    };
    if !s.objects.iter().all(inside) {
        out.push("bounds");
    }
    let n = s.objects.len();
    let clash = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).any(|(i, j)| {
        let (a, b) = (&s.objects[i], &s.objects[j]);
        let d = (a.region.center[0] - b.region.center[0]).hypot(a.region.center[1] - b.region.center[1]);
        d < a.region.spread + b.region.spread + a.footprint_radius + b.footprint_radius + q.clearance
    });
    if clash {
        out.push("overlap");
    }
    if 2.0 * s.target().footprint_radius > q.max_grasp_width + 1e-12 {
        out.push("graspability");
    }
    let d = s.instruction.len() / 2;
    for (query, want) in [(&s.instruction[..d], s.goal.0), (&s.instruction[d..], s.goal.1)] {
        let dist = |o: &flowlab::scenes::SceneObjectSpec| {
            o.descriptor.iter().zip(query).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let own = dist(&s.objects[want]);
        if s.objects.iter().enumerate().any(|(j, o)| j != want && dist(o) - own < q.reference_margin) {
            out.push("reference_resolution");
            break;
        }
    }
    out
}

fn inject(kind: Checker, base: &SceneSpec, rng: &mut impl Rng) -> SceneSpec {
    let mut s = base.clone();
    let n = s.objects.len();
    match kind {
        Checker::Overlap => {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            let c = s.objects[i].region.center;
            let jitter = 0.5 * s.objects[i].footprint_radius;
            s.objects[j].region.center = [c[0] + rng.random_range(-jitter..jitter), c[1] + rng.random_range(-jitter..jitter)];
        }
        Checker::Bounds => {
            let i = rng.random_range(0..n);
            let r = &mut s.objects[i].region;
            match rng.random_range(0..4) {
                0 => r.center[0] = 0.4 + rng.random_range(0.0..0.2),
                1 => r.center[0] = 0.2 - rng.random_range(0.0..0.2),
                2 => r.center[1] = 0.15 + rng.random_range(0.0..0.2),
                _ => r.center[1] = -0.15 - rng.random_range(0.0..0.2),
            }
        }
        Checker::Graspability => {
            // Beyond what the one-shot rescale may repair.
            let a = s.goal.0;
            s.objects[a].footprint_radius = rng.random_range(0.08..0.15);
        }
        Checker::ReferenceResolution => {
            let (a, b) = s.goal;
            let victim = (0..n).find(|&j| j != a && j != b).unwrap_or(b);
            let mut d = s.objects[a].descriptor.clone();
            d.iter_mut().for_each(|v| *v += rng.random_range(-0.01..0.01));
            s.objects[victim].descriptor = d;
        }
    }
    s
}

pub fn run() -> Verdict {
    let cfg = CorpusConfig::default();
    let q = &cfg.qa;
    let corpus = generate_corpus(CORPUS, 41, &cfg).map_err(|e| e.to_string())?;
    let bad: Vec<String> = corpus
        .scenes
        .iter()
        .filter_map(|s| {
            let v = violations(s, q);
            (!v.is_empty()).then(|| format!("{} violates {v:?}", s.scene_id))
        })
        .collect();
    ensure(bad.is_empty(), || format!("{} accepted scenes fail re-verification: {}", bad.len(), bad.join("; ")))?;

    let mut rng = stream(42, "qa-faults", 0);
    let mut rejected = 0;
    let mut misnamed = Vec::new();
    for kind in [Checker::Overlap, Checker::Bounds, Checker::Graspability, Checker::ReferenceResolution] {
        for i in 0..FAULTS_PER_KIND {
            let spec = inject(kind, &corpus.scenes[i % CORPUS], &mut rng);
            let (report, _) = qa_check(&spec, q);
            if report.verdict == QaVerdict::Reject && report.failed().contains(&kind) {
                rejected += 1;
            } else {
                misnamed.push(format!("{} fault on {} gave {:?}", kind.name(), spec.scene_id, report.failed()));
            }
        }
    }
    let total = 4 * FAULTS_PER_KIND;
    ensure(rejected == total, || format!("{rejected}/{total} faults rejected correctly; first miss: {}", misnamed[0]))?;

    let mut scaled = 0;
    for i in 0..FAULTS_PER_KIND {
        let mut spec = corpus.scenes[i].clone();
        let a = spec.goal.0;
        spec.objects[a].footprint_radius = rng.random_range(0.0375..0.074);
        let (report, repaired) = qa_check(&spec, q);
        let d = 2.0 * repaired.target().footprint_radius;
        ensure(d <= 0.074 + 1e-12 && report.target_scale < 1.0 && report.passed(Checker::Graspability), || {
            format!("oversize target on {} left at {d:.4} m (scale {})", spec.scene_id, report.target_scale)
        })?;
        scaled += 1;
    }
    Ok(format!(
        "{CORPUS} accepted scenes re-verified clean; {rejected}/{total} injected faults rejected by the named checker; {scaled} oversize targets scaled to <= 0.074 m"
    ))
}
