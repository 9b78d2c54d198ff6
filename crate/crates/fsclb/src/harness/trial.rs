//! One trial of the asynchronous federated round loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Algo, EnvSpec, ExperimentConfig, TransportKind};
use super::invariants::{InvariantReport, ORACLE_RTOL};
use crate::agent::{AgentState, BanditParams};
use crate::baselines::{random_select, FedLinAgent};
use crate::env::{load_dataset_csv, Environment, RoundDraw, Schedule, SyntheticEnv};
use crate::error::{Error, Result};
use crate::protocol::{
    CommLedger, InProcTransport, SessionAlgo, SessionInit, TcpServer, TcpTransport, Transport,
};
use crate::server::ServerState;
use crate::spectral::{spectral_error, spd_log_det, symmetric_eigenvalues, DenseMatrix, DenseVector};

const STREAM_SETUP: u64 = 0;
const STREAM_ENV: u64 = 1;
const STREAM_SCHEDULE: u64 = 2;
const STREAM_POLICY: u64 = 3;

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub trial: usize,
    pub t: u64,
    pub agent: usize,
    pub chosen_arm: usize,
    pub reward: f64,
    pub instant_regret: f64,
    pub cum_regret: f64,
    pub comm_fired: bool,
    pub upload_scalars: u64,
    pub download_scalars: u64,
    /// Active agent's local truncation mass after its update.
    pub rho_loc: f64,
    /// Active agent's synchronized `Δ` at the end of the round.
    pub delta: f64,
    pub trigger_eval_ns: u64,
    pub round_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    /// Resolved configuration; `d` is filled in for dataset runs.
    pub config: ExperimentConfig,
    pub trial: usize,
    pub seed: u64,
    pub cum_regret: f64,
    pub cum_reward: f64,
    pub ledger: CommLedger,
    pub median_trigger_eval_ns: f64,
    pub total_ns: u64,
    /// `ρ_ser + ρ̃` at the end of the run (FSCLB only).
    pub final_delta: f64,
    /// Spectral error of the realized gram (theory mode only).
    pub epsilon_hat: Option<f64>,
    /// Communication bound evaluated with `epsilon_hat`.
    pub comm_bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub records: Vec<RoundRecord>,
    pub summary: TrialSummary,
    pub invariants: Option<InvariantReport>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Loads the environment and fills in `d` for dataset runs.
pub fn resolve_config(config: &ExperimentConfig) -> Result<(ExperimentConfig, Option<crate::env::DatasetEnv>)> {
    config.validate()?;
    match &config.env {
        EnvSpec::Synthetic { .. } => Ok((config.clone(), None)),
        EnvSpec::Dataset { path } => {
            let data = load_dataset_csv(path, config.k)?;
            if config.d != 0 && config.d != data.dim() {
                return Err(Error::Config(format!(
                    "config has d = {} but {} has {} feature columns",
                    config.d,
                    path.display(),
                    data.dim()
                )));
            }
            let resolved = ExperimentConfig {
                d: data.dim(),
                ..config.clone()
            };
            resolved.validate()?;
            Ok((resolved, Some(data)))
        }
    }
}

enum Policy {
    Fsclb(Vec<AgentState>),
    FedLin(Vec<FedLinAgent>),
    Random(Box<ChaCha8Rng>),
}

/// Proof-side state kept only in theory mode.
struct Theory {
    shadow: ServerState,
    /// Server matrix after the previous upload.
    last_server: DenseMatrix,
    total_gram: DenseMatrix,
    report: InvariantReport,
}

struct Round {
    fired: bool,
    up: u64,
    down: u64,
    rho_loc: f64,
    delta: f64,
    trigger_ns: u64,
}

/// Runs trial number `trial`; its seed is `config.seed + trial`.
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialOutput> {
    let (config, dataset) = resolve_config(config)?;
    let seed = config.seed.wrapping_add(trial as u64);
    let params = config.params();

    let mut setup_rng = stream(seed, STREAM_SETUP);
    let env = match dataset {
        Some(data) => Environment::Dataset(data),
        None => Environment::Synthetic(SyntheticEnv::new(
            config.d,
            config.arm_rank().unwrap_or(config.d),
            config.k,
            config.noise_r,
            config.s_norm,
            config.arm_bound,
            &mut setup_rng,
        )?),
    };
    let mut env_rng = stream(seed, STREAM_ENV);
    let mut sched_rng = stream(seed, STREAM_SCHEDULE);
    let schedule = Schedule::new(config.schedule.mode(), config.m)?;

    let mut policy = match config.algo {
        Algo::Fsclb => Policy::Fsclb(
            (0..config.m)
                .map(|i| AgentState::new(i, &params, config.theory))
                .collect::<Result<_>>()?,
        ),
        Algo::Fedlinucb => Policy::FedLin(
            (0..config.m)
                .map(|i| FedLinAgent::new(i, &params))
                .collect::<Result<_>>()?,
        ),
        Algo::Random => Policy::Random(Box::new(stream(seed, STREAM_POLICY))),
    };

    let mut server_thread = None;
    let mut transport: Option<Box<dyn Transport>> = match config.algo {
        Algo::Random => None,
        Algo::Fsclb | Algo::Fedlinucb => Some(match config.transport {
            TransportKind::Inproc => Box::new(InProcTransport::new(config.theory)),
            TransportKind::Tcp => match &config.tcp_addr {
                Some(addr) => Box::new(TcpTransport::connect(addr.as_str())?),
                None => {
                    let server = TcpServer::bind("127.0.0.1:0")?;
                    let addr = server.local_addr()?;
                    server_thread = Some(server.spawn_n(1));
                    Box::new(TcpTransport::connect(addr)?)
                }
            },
        }),
    };
    if let Some(t) = transport.as_mut() {
        t.init(&SessionInit {
            algo: if config.algo == Algo::Fsclb {
                SessionAlgo::Fsclb
            } else {
                SessionAlgo::FedLin
            },
            l: config.l,
            d: config.d,
            lambda: config.lambda,
        })?;
    }

    let mut theory = if config.theory && config.algo == Algo::Fsclb {
        Some(Theory {
            shadow: ServerState::new(config.l, config.d, config.lambda, true)?,
            last_server: DenseMatrix::identity(config.d, config.d) * config.lambda,
            total_gram: DenseMatrix::zeros(config.d, config.d),
            report: InvariantReport::default(),
        })
    } else {
        None
    };
    let noiseless_theta = match (&env, config.noise_r == 0.0) {
        (Environment::Synthetic(e), true) => Some(e.theta_star.clone()),
        _ => None,
    };
    let rho_free = config.algo == Algo::Fsclb
        && config.arm_rank().is_some_and(|r| r < config.l);

    let mut records = Vec::with_capacity(config.horizon as usize);
    let mut cum_regret = 0.0;
    let mut cum_reward = 0.0;
    let mut trigger_times = Vec::with_capacity(config.horizon as usize);
    let started = Instant::now();

    for t in 1..=config.horizon {
        let agent = schedule.next(t, &mut sched_rng);
        let draw = env.step(&mut env_rng).map_err(|e| e.at(t, agent))?;
        let round_start = Instant::now();

        let (choice, outcome) = play_round(
            &mut policy,
            transport.as_deref_mut(),
            theory.as_mut(),
            noiseless_theta.as_ref(),
            rho_free,
            &params,
            agent,
            t,
            &draw,
        )
        .map_err(|e| e.at(t, agent))?;

        let round_ns = round_start.elapsed().as_nanos() as u64;
        let reward = draw.reward(choice);
        let regret = draw.regret(choice);
        cum_regret += regret;
        cum_reward += reward;
        trigger_times.push(outcome.trigger_ns);
        records.push(RoundRecord {
            trial,
            t,
            agent,
            chosen_arm: choice,
            reward,
            instant_regret: regret,
            cum_regret,
            comm_fired: outcome.fired,
            upload_scalars: outcome.up,
            download_scalars: outcome.down,
            rho_loc: outcome.rho_loc,
            delta: outcome.delta,
            trigger_eval_ns: if config.record_timing { outcome.trigger_ns } else { 0 },
            round_ns: if config.record_timing { round_ns } else { 0 },
        });
    }
    let total_ns = started.elapsed().as_nanos() as u64;

    let ledger = transport.as_ref().map(|t| *t.ledger()).unwrap_or_default();
    drop(transport);
    if let Some(handle) = server_thread {
        handle
            .join()
            .map_err(|_| Error::Protocol("loopback server panicked".into()))??;
    }

    let final_delta = match &policy {
        Policy::Fsclb(agents) => agents.iter().map(|a| a.delta).fold(0.0, f64::max),
        _ => 0.0,
    };
    let (mut epsilon_hat, mut comm_bound) = (None, None);
    let invariants = match theory {
        Some(mut th) => {
            let eigs = symmetric_eigenvalues(&th.total_gram)?;
            let eps = spectral_error(&eigs, config.lambda, config.l)?;
            let bound = communication_bound(&params, eps);
            th.report.record(
                "comm_bound",
                config.horizon,
                (ledger.switching_count as f64 - bound) / bound,
                0.0,
            );
            epsilon_hat = Some(eps);
            comm_bound = Some(bound);
            Some(th.report)
        }
        None => None,
    };

    trigger_times.sort_unstable();
    let median_trigger_eval_ns = median(&trigger_times);
    Ok(TrialOutput {
        records,
        summary: TrialSummary {
            config,
            trial,
            seed,
            cum_regret,
            cum_reward,
            ledger,
            median_trigger_eval_ns,
            total_ns,
            final_delta,
            epsilon_hat,
            comm_bound,
        },
        invariants,
    })
}

fn median(sorted: &[u64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0,
    }
}

/// `2d(M + 1/α) ln((1 + ε_l)(1 + T L² / (λ d)))`.
pub fn communication_bound(params: &BanditParams, epsilon: f64) -> f64 {
    let d = params.d as f64;
    let growth = 1.0
        + params.horizon as f64 * params.arm_bound * params.arm_bound / (params.lambda * d);
    2.0 * d * (params.m as f64 + 1.0 / params.alpha) * ((1.0 + epsilon) * growth).ln()
}

#[allow(clippy::too_many_arguments)]
fn play_round(
    policy: &mut Policy,
    transport: Option<&mut (dyn Transport + '_)>,
    theory: Option<&mut Theory>,
    noiseless_theta: Option<&DenseVector>,
    rho_free: bool,
    params: &BanditParams,
    m: usize,
    t: u64,
    draw: &RoundDraw,
) -> Result<(usize, Round)> {
    let mut out = Round {
        fired: false,
        up: 0,
        down: 0,
        rho_loc: 0.0,
        delta: 0.0,
        trigger_ns: 0,
    };
    match policy {
        Policy::Random(rng) => Ok((random_select(draw.arms.len(), rng)?, out)),
        Policy::FedLin(agents) => {
            let agent = &mut agents[m];
            let choice = agent.select_arm(&draw.arms)?;
            let x = &draw.arms[choice];
            agent.local_update(x, draw.reward(choice));
            let clock = Instant::now();
            let eval = agent.evaluate_trigger(params)?;
            out.trigger_ns = clock.elapsed().as_nanos() as u64;
            if eval.fire {
                let transport = transport.expect("fedlin runs with a transport");
                let before = *transport.ledger();
                let down = transport.exchange_fedlin(&agent.make_upload(t))?;
                agent.apply_download(&down, params)?;
                let after = transport.ledger();
                out.fired = true;
                out.up = after.uploaded_scalars - before.uploaded_scalars;
                out.down = after.downloaded_scalars - before.downloaded_scalars;
            }
            Ok((choice, out))
        }
        Policy::Fsclb(agents) => {
            let agent = &mut agents[m];
            let choice = agent.select_arm(params, &draw.arms)?;
            let x = &draw.arms[choice];
            agent.local_update(x, draw.reward(choice))?;
            out.rho_loc = agent.local.rho();
            let clock = Instant::now();
            let eval = agent.evaluate_trigger(params)?;
            out.trigger_ns = clock.elapsed().as_nanos() as u64;

            let mut theory = theory;
            if let Some(th) = theory.as_deref_mut() {
                th.total_gram.ger(1.0, x, x, 1.0);
            }
            if eval.fire {
                let transport = transport.expect("fsclb runs with a transport");
                let up = agent.make_upload(t);
                let before = *transport.ledger();
                let exact = agent.theory_gram.clone();
                let down = transport.exchange(&up, exact.as_ref())?;
                let after = transport.ledger();
                out.fired = true;
                out.up = after.uploaded_scalars - before.uploaded_scalars;
                out.down = after.downloaded_scalars - before.downloaded_scalars;

                if let Some(th) = theory.as_deref_mut() {
                    check_upload(th, agent, &up, exact.as_ref(), t)?;
                    let shadow_down = th.shadow.handle_upload(&up, exact.as_ref())?;
                    th.report.record(
                        "transport_consistency",
                        t,
                        if shadow_down == down { 0.0 } else { 1.0 },
                        0.0,
                    );
                }
                agents[m].apply_download(&down, params)?;
                if let Some(th) = theory {
                    check_server(th, agents, m, params, t, x, noiseless_theta, rho_free)?;
                }
            }
            out.delta = agents[m].delta;
            Ok((choice, out))
        }
    }
}

/// SCFD dominance of the uploaded local sketch against its exact gram.
fn check_upload(
    th: &mut Theory,
    agent: &AgentState,
    up: &crate::protocol::UploadMsg,
    exact: Option<&DenseMatrix>,
    t: u64,
) -> Result<()> {
    let Some(exact) = exact else {
        return Ok(());
    };
    let sketch_gram = up.s_loc.tr_mul(&up.s_loc);
    th.report.record_psd("scfd_upper", t, &agent.local.approx_gram(), exact)?;
    th.report.record_psd("scfd_lower", t, exact, &sketch_gram)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn check_server(
    th: &mut Theory,
    agents: &[AgentState],
    m: usize,
    params: &BanditParams,
    t: u64,
    x: &DenseVector,
    noiseless_theta: Option<&DenseVector>,
    rho_free: bool,
) -> Result<()> {
    let server = &th.shadow;
    let d = params.d;
    let v = server.dense_matrix();
    let exact = server.theory_gram.clone().expect("shadow server tracks the exact gram");

    th.report.record_psd("server_monotonicity", t, &v, &th.last_server)?;
    let mut upper = exact.clone();
    let mut lower = exact;
    for i in 0..d {
        upper[(i, i)] += params.lambda + server.delta_ser;
        lower[(i, i)] += params.lambda;
    }
    th.report.record_psd("sandwich_upper", t, &upper, &v)?;
    th.report.record_psd("sandwich_lower", t, &v, &lower)?;

    // (1/α) comparison: every idle agent's pending increment
    for (j, other) in agents.iter().enumerate() {
        if j == m {
            continue;
        }
        let pending = other.local.approx_gram() / params.alpha;
        th.report.record_psd("sketch_comparison", t, &v, &pending)?;
    }

    let chol = nalgebra::Cholesky::new(v.clone())
        .ok_or_else(|| Error::InvalidState("server matrix is not positive definite".into()))?;
    let theta = chol.solve(&server.b_ser);
    th.report
        .record_close("theta_oracle", t, server.theta_hat.as_slice(), theta.as_slice());
    let log_det = spd_log_det(&v)?;
    th.report
        .record("logdet_oracle", t, (server.log_det_v - log_det).abs(), ORACLE_RTOL);

    let agent = &agents[m];
    let q = agent.exploration_form(params, x);
    let q_dense = x.dot(&chol.solve(x));
    th.report.record_close("woodbury_oracle", t, &[q], &[q_dense]);

    if let Some(theta_star) = noiseless_theta {
        let err = &agent.theta_hat - theta_star;
        let norm = err.dot(&(&v * &err)).max(0.0).sqrt();
        th.report
            .record("containment", t, (norm - agent.beta) / agent.beta.max(1.0), 1e-12);
    }
    if rho_free {
        let rho = server.rho_ser.max(server.rho_tilde()).max(server.delta_ser);
        th.report.record("rho_zero", t, rho, 0.0);
    }
    th.last_server = v;
    Ok(())
}
