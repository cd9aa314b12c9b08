use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use dmtf_core::gridnav::{load_suite, AgentPose, Cell, EpisodeSpec, GridMap, Heading};
use dmtf_core::metrics::{read_jsonl, TrajectoryRecord};
use dmtf_core::Error;

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Suite JSON the episode came from.
    #[arg(long)]
    pub suite: PathBuf,
    /// Trajectory log written by `eval --dump-trajectories`.
    #[arg(long)]
    pub trajectories: PathBuf,
    #[arg(long)]
    pub episode: u64,
    /// Write frames here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn arrow(h: Heading) -> char {
    match h {
        Heading::N => '^',
        Heading::E => '>',
        Heading::S => 'v',
        Heading::W => '<',
    }
}

/// The map with `#` walls, `S` at the source, `*` on visited cells and the
/// agent drawn as a heading arrow; north is up.
pub fn draw(map: &GridMap, source: Cell, visited: &[Cell], agent: AgentPose) -> String {
    let mut s = String::with_capacity((map.width + 1) * map.height);
    for y in (0..map.height as i32).rev() {
        for x in 0..map.width as i32 {
            let c = Cell::new(x, y);
            let ch = if c == agent.cell {
                arrow(agent.heading)
            } else if c == source {
                'S'
            } else if !map.is_free(c) {
                '#'
            } else if visited.contains(&c) {
                '*'
            } else {
                '.'
            };
            s.push(ch);
        }
        s.push('\n');
    }
    s
}

/// One frame per trajectory record, each headed by its step data.
pub fn frames(spec: &EpisodeSpec, records: &[TrajectoryRecord]) -> Result<String, Error> {
    let map = spec.map.build()?;
    let mut out = String::new();
    let mut visited = Vec::new();
    for r in records {
        let importance = match (r.w_vis, r.w_aud) {
            (Some(v), Some(a)) => format!(" w_vis={v:.3} w_aud={a:.3}"),
            _ => String::new(),
        };
        writeln!(
            out,
            "t={} action={} reward={:.3} geodesic={}{importance}{}",
            r.t,
            r.action.name(),
            r.reward,
            r.geodesic,
            if r.done { " done" } else { "" }
        )
        .expect("string write");
        out.push_str(&draw(&map, spec.source, &visited, r.pose));
        out.push('\n');
        visited.push(r.pose.cell);
    }
    Ok(out)
}

pub fn replay(a: &ReplayArgs) -> Result<(), Error> {
    let suite = load_suite(&a.suite)?;
    let spec = suite
        .episodes
        .iter()
        .find(|e| e.id == a.episode)
        .ok_or_else(|| Error::Config(format!("episode {} is not in suite {}", a.episode, suite.id)))?;
    let records: Vec<TrajectoryRecord> = read_jsonl::<TrajectoryRecord>(&a.trajectories)?
        .into_iter()
        .filter(|r| r.episode == a.episode)
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{} has no records for episode {}",
            a.trajectories.display(),
            a.episode
        )));
    }
    let text = frames(spec, &records)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}
