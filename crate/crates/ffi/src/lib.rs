//! C ABI over the allocation environment and saved policies.
//!
//! All objects are opaque handles created by `*_new`/`*_load` and released
//! by the matching `*_free`. Every fallible call returns a [`PrbStatus`];
//! on failure [`prb_last_error`] describes the cause for the calling thread.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use prbgnn::agent::{select_action, ActionMode, Policy, PolicyInput};
use prbgnn::config::RunConfig;
use prbgnn::env::{Env, Observation};
use prbgnn::{build_state_graph, persist, Error, Rng};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrbStatus {
    Ok = 0,
    NullArgument = 1,
    /// Bad config JSON, unreadable or mismatched policy file.
    Config = 2,
    Numeric = 3,
    /// Call out of order, e.g. stepping a finished episode or an invalid action.
    Contract = 4,
    Panic = 5,
}

/// A loaded policy.
pub struct PrbPolicy {
    policy: Policy,
}

/// An environment plus the observation window the policies consume.
pub struct PrbEnv {
    cfg: RunConfig,
    seed: u64,
    env: Env,
    window: VecDeque<Observation>,
    rng: Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> PrbStatus {
    match e {
        Error::Numeric(_) => PrbStatus::Numeric,
        Error::Contract(_) | Error::Shape { .. } => PrbStatus::Contract,
        _ => PrbStatus::Config,
    }
}

fn guard(f: impl FnOnce() -> Result<(), PrbStatus>) -> PrbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PrbStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            PrbStatus::Panic
        }
    }
}

fn fail(e: Error) -> PrbStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> PrbStatus {
    set_error(format!("{what} is null"));
    PrbStatus::NullArgument
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PrbStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        PrbStatus::Config
    })
}

impl PrbEnv {
    fn reset(&mut self, episode: u64) -> Result<(), Error> {
        let (obs, env) = Env::reset(&self.cfg.env, &self.cfg.traffic, self.seed, episode)?;
        self.env = env;
        self.window.clear();
        self.window.push_back(obs);
        Ok(())
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn prb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a policy file written by `prbgnn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn prb_policy_load(path: *const c_char, out: *mut *mut PrbPolicy) -> PrbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let file = persist::load(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(PrbPolicy { policy: file.policy }));
        Ok(())
    })
}

/// Number of actions of a loaded policy, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prb_policy_num_actions(policy: *const PrbPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.num_actions())
}

/// # Safety
/// `policy` must be null or a handle from [`prb_policy_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn prb_policy_free(policy: *mut PrbPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Creates an environment from a run-config JSON document (null for the
/// defaults) and resets it to episode 0.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prb_env_new(config_json: *const c_char, seed: u64, out: *mut *mut PrbEnv) -> PrbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(str_arg(config_json, "config_json")?).map_err(fail)?
        };
        let (obs, env) = Env::reset(&cfg.env, &cfg.traffic, seed, 0).map_err(fail)?;
        let mut window = VecDeque::with_capacity(cfg.env.window_size + 1);
        window.push_back(obs);
        *out = Box::into_raw(Box::new(PrbEnv {
            seed,
            env,
            window,
            rng: Rng::new(seed),
            cfg,
        }));
        Ok(())
    })
}

/// Starts episode `episode` of the handle's seed.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn prb_env_reset(env: *mut PrbEnv, episode: u64) -> PrbStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        env.reset(episode).map_err(fail)
    })
}

/// PRBs the UE needs at the current step.
///
/// # Safety
/// `env` must be a live handle and `required` writable.
#[no_mangle]
pub unsafe extern "C" fn prb_env_required(env: *const PrbEnv, required: *mut u32) -> PrbStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if required.is_null() {
            return Err(null("required"));
        }
        if env.env.is_done() {
            return Err(fail(Error::Contract("episode finished".into())));
        }
        *required = env.env.current_required();
        Ok(())
    })
}

/// Applies `action`. Any of the output pointers may be null.
///
/// # Safety
/// `env` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn prb_env_step(
    env: *mut PrbEnv,
    action: usize,
    reward: *mut f64,
    gap: *mut i64,
    done: *mut bool,
) -> PrbStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        let res = env.env.step(action).map_err(fail)?;
        env.window.push_back(res.observation);
        if env.window.len() > env.cfg.env.window_size {
            env.window.pop_front();
        }
        if !reward.is_null() {
            *reward = res.reward;
        }
        if !gap.is_null() {
            *gap = res.gap;
        }
        if !done.is_null() {
            *done = res.done;
        }
        Ok(())
    })
}

/// Greedy action of `policy` for the environment's current state window.
///
/// # Safety
/// Both handles must be live and `action` writable.
#[no_mangle]
pub unsafe extern "C" fn prb_select_action(env: *mut PrbEnv, policy: *const PrbPolicy, action: *mut usize) -> PrbStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        let policy = policy.as_ref().ok_or_else(|| null("policy"))?;
        if action.is_null() {
            return Err(null("action"));
        }
        if env.env.is_done() {
            return Err(fail(Error::Contract("episode finished".into())));
        }
        persist::check_dims(&policy.policy, &env.cfg.env).map_err(fail)?;
        let graph = build_state_graph(env.window.make_contiguous(), env.cfg.env.window_size).map_err(fail)?;
        let input = PolicyInput {
            graph: &graph,
            required_prbs: env.env.current_required(),
        };
        let choice = select_action(&policy.policy, &input, &mut env.rng, ActionMode::Greedy).map_err(fail)?;
        *action = choice.action;
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`prb_env_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn prb_env_free(env: *mut PrbEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}
