"""Optimizer, training loop, evaluation metrics, and checkpoints.

Forward-kinematics fitting trains on freshly generated batches every step;
motion prediction samples batches from a fixed dataset file. Validation runs
every ``validate_every`` steps (including step 0) and the checkpoint with the
lowest validation MSE is kept. Runs are bit-deterministic for a fixed seed
and thread count: all randomness flows through named Philox streams and each
metrics row / checkpoint byte is a pure function of the config.
"""

import contextlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import autodiff as ad
from . import network as net
from ._accel import backend, thread_count
from .container import read_container, write_container
from .errors import ConfigError, DivergedError
from .kinematics import bundled_robot_names, bundled_robot_text, fk_batch, parse_robot
from .rng import fnv1a64, stream
from .tasks import fk_input_dim, generate_fk_dataset, read_dataset, sample_fk_batch

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(data, grad, m, v, t, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Bias-corrected Adam update of one parameter array, in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a list of parameter tensors; weight decay is additive L2."""

    def __init__(self, params, lr, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            grad = p.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            adam_step(p.data, grad, m, v, self.t, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    task: str  # "fk" | "motion"
    backbone: str  # "rodrinet" | "mlp"
    out_dir: str
    robot: str = None  # bundled name or path (fk task; motion reads the dataset's)
    train_data: str = None  # motion task
    val_data: str = None  # motion task
    iterations: int = 10_000
    batch_size: int = 256
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    validate_every: int = 500
    seed: int = 0
    precision: str = "single"
    val_size: int = 10_000  # fk task: generated validation-set size
    network: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("fk", "motion"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.backbone not in ("rodrinet", "mlp"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.iterations > 0 and self.validate_every > self.iterations:
            raise ConfigError(
                f"validate_every {self.validate_every} exceeds iterations {self.iterations}"
            )

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def resolve_robot_text(spec: str) -> str:
    if spec in bundled_robot_names():
        return bundled_robot_text(spec)
    with open(spec, "r", encoding="utf-8") as fh:
        return fh.read()


def build_model(task, backbone, tree, network_cfg: dict, rng, dtype):
    if backbone == "mlp":
        in_dim = fk_input_dim(tree) if task == "fk" else 8 * tree.dof
        out_dim = tree.num_links * 12 if task == "fk" else 8 * tree.dof
        cfg = dict(network_cfg)
        if "widths" in cfg:
            widths = cfg["widths"]
        elif "match_params" in cfg:
            widths = net.mlp_widths_matching(
                cfg["match_params"], in_dim, out_dim, cfg.get("hidden_layers", 6)
            )
        else:
            raise ConfigError("mlp network config needs 'widths' or 'match_params'")
        if widths[0] != in_dim or widths[-1] != out_dim:
            raise ConfigError(
                f"mlp widths {widths[0]}/{widths[-1]} do not match task dims {in_dim}/{out_dim}"
            )
        return net.MLP(widths, rng, dtype)
    cfg = net.RodriNetConfig.from_dict(network_cfg)
    if task == "fk":
        return net.FkNetwork(tree, cfg, rng, dtype)
    return net.MotionNetwork(tree, cfg, rng, dtype)


def _forward_batched(model, inputs, batch=1024):
    outs = [
        model(ad.constant(inputs[i : i + batch])).data for i in range(0, len(inputs), batch)
    ]
    return np.concatenate(outs, axis=0)


def evaluate_fk(model, inputs, targets) -> dict:
    preds = _forward_batched(model, inputs)
    mse = float(np.mean((preds.astype(np.float64) - targets.astype(np.float64)) ** 2))
    return {"mse": mse}


def _batched_geodesic(rot_a, rot_b):
    rel_trace = np.einsum("nij,nij->n", rot_a, rot_b)
    return np.arccos(np.clip((rel_trace - 1.0) / 2.0, -1.0, 1.0))


def evaluate_motion(model, tree, inputs, targets) -> dict:
    """MSE on raw angle outputs plus end-effector position/orientation and
    joint-angle errors, all computed by running forward kinematics on the
    predicted frames in double precision."""
    n = inputs.shape[0]
    frames_out, dof = targets.shape[1], tree.dof
    preds = _forward_batched(model, inputs.reshape(n, -1)).astype(np.float64)
    truth = targets.reshape(n, -1).astype(np.float64)
    mse = float(np.mean((preds - truth) ** 2))
    pred_angles = preds.reshape(n * frames_out, dof)
    true_angles = truth.reshape(n * frames_out, dof)
    ee = tree.end_effector_index()
    pred_poses = fk_batch(tree, None, pred_angles)[:, ee]
    true_poses = fk_batch(tree, None, true_angles)[:, ee]
    error_t = float(np.mean(np.linalg.norm(pred_poses[:, :3, 3] - true_poses[:, :3, 3], axis=1)))
    error_r = float(np.mean(_batched_geodesic(pred_poses[:, :3, :3], true_poses[:, :3, :3])))
    error_theta = float(np.mean(np.abs(pred_angles - true_angles)))
    return {
        "mse": mse,
        "error_t_mm": error_t * 1000.0,
        "error_r_deg": np.degrees(error_r),
        "error_theta_deg": np.degrees(error_theta),
    }


METRIC_COLUMNS = {
    "fk": ["step", "train_mse", "val_mse"],
    "motion": ["step", "train_mse", "val_mse", "error_t_mm", "error_r_deg", "error_theta_deg"],
}


def save_checkpoint(path, model, meta: dict, step: int) -> None:
    meta = dict(meta)
    meta["step"] = step
    arrays = [(name, t.data) for name, t in model.named_parameters()]
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path):
    """(model, tree, metadata) from a checkpoint container."""
    meta, arrays = read_container(path, expect_kind="checkpoint")
    tree = parse_robot(meta["robot_description"])
    cfg = TrainConfig.from_dict(meta["config"])
    model = build_model(cfg.task, cfg.backbone, tree, cfg.network, stream(0, "load"), cfg.dtype)
    for name, tensor in model.named_parameters():
        if name not in arrays:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != tensor.shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                f"model expects {tensor.shape}"
            )
        tensor.data = arrays[name].astype(cfg.dtype)
    return model, tree, meta


def _file_checksum(path) -> str:
    with open(path, "rb") as fh:
        return f"{fnv1a64(fh.read()):016x}"


def _format_row(values) -> str:
    return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


def train(cfg: TrainConfig, threads=None):
    """Run the loop; returns (best_checkpoint_path, metrics_csv_path).

    Writes out_dir/manifest.json before the first step and finalizes it on
    exit even when the run fails.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    dtype = cfg.dtype

    input_checksums = {}
    if cfg.task == "fk":
        if cfg.robot is None:
            raise ConfigError("fk task requires a robot description")
        robot_text = resolve_robot_text(cfg.robot)
        tree = parse_robot(robot_text)
        val_inputs, val_targets = generate_fk_dataset(tree, cfg.val_size, cfg.seed + 1)
        train_gen = stream(cfg.seed, "fk-train")
        probe_inputs, probe_targets = sample_fk_batch(
            tree, cfg.batch_size, stream(cfg.seed, "fk-train-probe")
        )
        num_train = None
    else:
        if not cfg.train_data or not cfg.val_data:
            raise ConfigError("motion task requires train_data and val_data files")
        train_meta, train_inputs, train_targets = read_dataset(cfg.train_data)
        val_meta, val_in3, val_tgt3 = read_dataset(cfg.val_data)
        for meta, path in ((train_meta, cfg.train_data), (val_meta, cfg.val_data)):
            if meta["task"] != "motion":
                raise ConfigError(f"{path} holds a {meta['task']!r} dataset, expected motion")
        if train_meta["robot_description"] != val_meta["robot_description"]:
            raise ConfigError("train and validation datasets use different robots")
        robot_text = train_meta["robot_description"]
        tree = parse_robot(robot_text)
        num_train = train_inputs.shape[0]
        if cfg.batch_size > num_train:
            raise ConfigError(
                f"batch size {cfg.batch_size} exceeds training-set size {num_train}"
            )
        train_x = train_inputs.reshape(num_train, -1)
        train_y = train_targets.reshape(num_train, -1)
        val_inputs, val_targets = val_in3, val_tgt3
        shuffle_gen = stream(cfg.seed, "shuffle")
        probe_inputs = train_x[: cfg.batch_size]
        probe_targets = train_y[: cfg.batch_size]
        input_checksums[cfg.train_data] = _file_checksum(cfg.train_data)
        input_checksums[cfg.val_data] = _file_checksum(cfg.val_data)

    manifest_path = os.path.join(cfg.out_dir, "manifest.json")
    manifest = {
        "config": cfg.to_dict(),
        "tool_version": __version__,
        "seed": cfg.seed,
        "kernel_backend": backend(),
        "threads": threads if threads is not None else thread_count(),
        "robot_checksum": f"{fnv1a64(robot_text.encode('utf-8')):016x}",
        "input_checksums": input_checksums,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "status": "running",
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    best_path = os.path.join(cfg.out_dir, "checkpoint_best.rdnt")
    final_path = os.path.join(cfg.out_dir, "checkpoint_final.rdnt")
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")

    # Steps of a fused-kernel model interleave numba parallel regions with
    # BLAS calls; keeping BLAS single-threaded for the run avoids the two
    # pools contending for cores.
    if cfg.backbone == "rodrinet" and backend() == "numba":
        blas_guard = threadpool_limits(limits=1, user_api="blas")
    else:
        blas_guard = contextlib.nullcontext()
    try:
        model = build_model(
            cfg.task, cfg.backbone, tree, cfg.network, stream(cfg.seed, "init"), dtype
        )
        params = net.parameters(model)
        optimizer = Adam(params, cfg.learning_rate, cfg.weight_decay)
        ckpt_meta = {
            "task": cfg.task,
            "backbone": cfg.backbone,
            "config": cfg.to_dict(),
            "robot_description": robot_text,
            "robot_name": tree.name,
            "dof": tree.dof,
            "tool_version": __version__,
        }

        def evaluate(inputs, targets):
            if cfg.task == "fk":
                return evaluate_fk(model, inputs.astype(dtype), targets.astype(dtype))
            return evaluate_motion(model, tree, inputs.astype(dtype), targets.astype(dtype))

        def batch_loss(x, y):
            pred = model(ad.constant(x.astype(dtype)))
            return ad.mse_loss(pred, ad.constant(y.astype(dtype)))

        best_val = np.inf
        columns = METRIC_COLUMNS[cfg.task]
        with blas_guard, open(metrics_path, "w", encoding="utf-8", newline="") as metrics:
            metrics.write(",".join(columns) + "\n")
            metrics.flush()

            def write_row(step, train_mse):
                row = evaluate(val_inputs, val_targets)
                values = [step, float(train_mse), row["mse"]] + [
                    row[c] for c in columns[3:]
                ]
                metrics.write(_format_row(values) + "\n")
                metrics.flush()
                return row["mse"]

            if cfg.iterations > 0:
                probe = float(batch_loss(probe_inputs, probe_targets).data)
                val_mse = write_row(0, probe)
                best_val = val_mse
                save_checkpoint(best_path, model, dict(ckpt_meta, val_mse=val_mse), 0)

            window = []
            for step in range(1, cfg.iterations + 1):
                if cfg.task == "fk":
                    x, y = sample_fk_batch(tree, cfg.batch_size, train_gen)
                else:
                    idx = shuffle_gen.choice(num_train, cfg.batch_size, replace=False)
                    x, y = train_x[idx], train_y[idx]
                loss = batch_loss(x, y)
                if not np.isfinite(loss.data):
                    raise DivergedError(step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                window.append(float(loss.data))
                if step % cfg.validate_every == 0:
                    val_mse = write_row(step, float(np.mean(window)))
                    window = []
                    if val_mse < best_val:
                        best_val = val_mse
                        save_checkpoint(
                            best_path, model, dict(ckpt_meta, val_mse=val_mse), step
                        )
        save_checkpoint(
            final_path, model, dict(ckpt_meta, val_mse=float(best_val)), cfg.iterations
        )
        if cfg.iterations == 0:
            save_checkpoint(best_path, model, dict(ckpt_meta, val_mse=float("inf")), 0)
        manifest["status"] = "ok"
    except BaseException as exc:
        manifest["status"] = f"error: {type(exc).__name__}: {exc}"
        raise
    finally:
        manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return best_path, metrics_path


def evaluate_checkpoint(checkpoint_path, data_path):
    """Evaluate a checkpoint on a dataset file; refuses mismatched pairs."""
    model, tree, meta = load_checkpoint(checkpoint_path)
    data_meta, inputs, targets = read_dataset(data_path)
    if data_meta["task"] != meta["task"]:
        raise ConfigError(
            f"checkpoint task {meta['task']!r} does not match dataset task "
            f"{data_meta['task']!r}"
        )
    if data_meta["dof"] != meta["dof"]:
        raise ConfigError(
            f"checkpoint dof {meta['dof']} does not match dataset dof {data_meta['dof']}"
        )
    dtype = TrainConfig.from_dict(meta["config"]).dtype
    if meta["task"] == "fk":
        row = evaluate_fk(model, inputs.astype(dtype), targets.astype(dtype))
    else:
        if data_meta["robot_description"] != meta["robot_description"]:
            raise ConfigError("checkpoint and dataset use different robot descriptions")
        row = evaluate_motion(model, tree, inputs.astype(dtype), targets.astype(dtype))
    row["step"] = meta["step"]
    return row
