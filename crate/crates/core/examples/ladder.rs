use hamiltonian_updates::hu::{hamiltonian_updates, SolverConfig, DiagRule};
use hamiltonian_updates::instances::{generate_instance, InstanceSeedSpec};
use hamiltonian_updates::search::{binary_search, reference_optimum, ReferenceOptions};
use std::time::Instant;

fn main() {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    for seed in 0..seeds {
        let c = generate_instance(&InstanceSeedSpec::block(128, 16, seed)).unwrap();
        let t = Instant::now();
        let r = reference_optimum(&c, &ReferenceOptions::default()).unwrap();
        let tr = t.elapsed().as_secs_f64();
        let eps = 0.01;
        let cfgs = [
            ("mom", SolverConfig::new(eps)),
            ("l2", SolverConfig::new(eps).with_beta(0.0)),
            ("adapt", SolverConfig { diag_rule: DiagRule::L1, scale_cost: false, ..SolverConfig::new(eps).with_beta(0.0) }),
        ];
        for (name, cfg) in &cfgs {
            let t = Instant::now();
            let f = hamiltonian_updates(&c, r.gamma_ref - eps, cfg).unwrap();
            let i = hamiltonian_updates(&c, r.gamma_ref + 0.02, cfg).unwrap();
            println!("seed {seed} ref {:.5} gap {:.1e} ({tr:.2}s sweeps {}) {name}: feas {:?} {}/{} infeas {:?} {}/{}  {:.2}s",
                r.gamma_ref, r.gap(), r.sweeps, f.kind(), f.ledger().iterations(), f.ledger().matrix_exponentials(),
                i.kind(), i.ledger().iterations(), i.ledger().matrix_exponentials(), t.elapsed().as_secs_f64());
        }
        let t = Instant::now();
        let s = binary_search(&c, &SolverConfig::new(eps), eps).unwrap();
        println!("   search {:?} {}/{} {:.2}s", s.bracket(), s.total_iterations(), s.total_matrix_exponentials(), t.elapsed().as_secs_f64());
    }
}
