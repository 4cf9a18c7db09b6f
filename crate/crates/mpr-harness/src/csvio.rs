//! CSV writers. All files are UTF-8 with a mandatory header row, and
//! byte-identical across reruns of the same seeded pipeline.

use mpr_core::error::CoreResult;
use mpr_core::predictor::EpochMetrics;
use mpr_core::reward::RewardStep;
use mpr_core::rl::EpisodeRow;
use std::io::Write;
use std::path::Path;

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

pub fn write_run_metrics(path: &Path, rows: &[EpisodeRow]) -> CoreResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "episode,env_steps,eval_success_rate,running20_success,actor_loss,critic_loss,alpha_ent,mean_reward"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.episode,
            r.env_steps,
            r.eval_success.map(fmt).unwrap_or_default(),
            fmt(r.running20),
            fmt(r.actor_loss),
            fmt(r.critic_loss),
            fmt(r.alpha_ent),
            fmt(r.mean_reward)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictor_metrics(path: &Path, rows: &[EpochMetrics]) -> CoreResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_loss,val_loss")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.epoch, fmt(r.train_loss), fmt(r.val_loss))?;
    }
    w.flush()?;
    Ok(())
}

/// One reward dump per episode: (t, reward, degenerate_flag, provider_kind).
pub fn write_reward_dump(path: &Path, provider: &str, steps: &[RewardStep]) -> CoreResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,reward,degenerate_flag,provider_kind")?;
    for s in steps {
        writeln!(
            w,
            "{},{},{},{}",
            s.t,
            fmt(s.reward),
            if s.degenerate { 1 } else { 0 },
            provider
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Figure CSV: per-provider success curves over the evaluation grid.
pub fn write_success_curves(
    path: &Path,
    rows: &[(String, usize, f64, f64, f64)],
) -> CoreResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "provider,episode,median_success,std_success,base_success")?;
    for (provider, episode, median, std, base) in rows {
        writeln!(
            w,
            "{provider},{episode},{},{},{}",
            fmt(*median),
            fmt(*std),
            fmt(*base)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Figure CSV: mean per-step reward against normalized episode time.
pub fn write_reward_curves(path: &Path, rows: &[(String, f64, f64, f64)]) -> CoreResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "provider,t_norm,mean_reward,std_reward")?;
    for (provider, t_norm, mean, std) in rows {
        writeln!(w, "{provider},{},{},{}", fmt(*t_norm), fmt(*mean), fmt(*std))?;
    }
    w.flush()?;
    Ok(())
}
