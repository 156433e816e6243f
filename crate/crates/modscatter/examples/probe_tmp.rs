use modscatter::expansion::build_table;
use modscatter::fields::Grid3;
use modscatter::profile::ScatteringProfile;

fn main() {
    let profile = ScatteringProfile::default_desk();
    let b = profile.support_radius();
    let table = build_table(&profile, 2, Grid3::for_support(b, 24).unwrap()).unwrap();
    for k in 1..=2 {
        for l in 0..=k {
            let direct = table.direct_f_integral(k, l).unwrap();
            let stored = &table.entry(k, l).p_script;
            let mut max_dev = 0.0f64;
            for (a, c) in direct.values.iter().zip(&stored.values) {
                max_dev = max_dev.max((a - c).abs());
            }
            println!(
                "({k},{l}) direct {:9.3e}  stored {:9.3e}  dev {:9.3e}  rho {:9.3e}",
                direct.max_abs(), stored.max_abs(), max_dev, table.entry(k, l).rho.max_abs()
            );
        }
    }
}
