"""Velocity-field priors: analytic Gaussian mixtures and small trained MLPs.

Every policy exposes ``chunk_shape`` and ``velocity(a, tau, obs=None)`` where
``a`` has shape (..., H, D). :class:`GmmPolicy` additionally provides the
closed-form marginal score, posterior mean and its vector-Jacobian product.
"""

import csv
import json
import logging
import re

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.mixture import GaussianMixture
from sklearn.utils.validation import check_is_fitted

from ._validation import check_chunk, check_tau

logger = logging.getLogger(__name__)

POLICY_FORMAT = "flowguide.policy"
POLICY_VERSION = 1
# Velocity at tau = 1 is extrapolated from just below the endpoint.
TAU_END = 1.0 - 1e-6


def _obs_key(obs):
    if obs is None:
        return None
    return getattr(obs, "scene_id", obs)


class GmmPolicy(BaseEstimator):
    """Isotropic Gaussian-mixture prior over flattened action chunks.

    Parameters
    ----------
    n_components : int
        Mixture size used by :meth:`fit`.
    obs_table : dict, optional
        Maps an observation id to per-component multiplicative reweighting.
    random_state : int, optional
        Seed for :meth:`fit`.
    reg_covar : float
        Variance floor added during :meth:`fit`. Scripted demonstrations are
        near-deterministic, so a floor well above the default leaves the prior
        room to be steered.

    Build directly from known components with :meth:`from_components`.
    """

    def __init__(self, n_components=2, obs_table=None, random_state=None, reg_covar=1e-6):
        self.n_components = n_components
        self.obs_table = obs_table
        self.random_state = random_state
        self.reg_covar = reg_covar

    @classmethod
    def from_components(cls, weights, means, sigmas, chunk_shape, obs_table=None):
        weights = np.asarray(weights, dtype=float).reshape(-1)
        means = np.asarray(means, dtype=float)
        sigmas = np.asarray(sigmas, dtype=float).reshape(-1)
        chunk_shape = tuple(int(s) for s in chunk_shape)
        n = int(np.prod(chunk_shape))
        means = means.reshape(len(weights), n)
        if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights <= 0) or np.any(weights > 1):
            raise ValueError("mixture weights must lie in (0, 1] and sum to 1")
        if sigmas.shape != weights.shape or np.any(sigmas <= 0):
            raise ValueError("need one positive sigma per component")
        policy = cls(n_components=len(weights), obs_table=obs_table)
        policy.weights_ = weights
        policy.means_ = means
        policy.sigmas_ = sigmas
        policy.chunk_shape_ = chunk_shape
        return policy

    def fit(self, X, y=None):
        """Fit a spherical mixture to chunks ``X`` of shape (n, H, D).

        When observation ids ``y`` are given, ``obs_table`` is filled with the
        mean component responsibility of each id relative to the global weight.
        """
        X = check_chunk(X, "X", min_ndim=3)
        n = X.shape[0]
        flat = X.reshape(n, -1)
        gm = GaussianMixture(n_components=self.n_components, covariance_type="spherical",
                             random_state=self.random_state, reg_covar=self.reg_covar)
        gm.fit(flat)
        self.weights_ = gm.weights_ / gm.weights_.sum()
        self.means_ = gm.means_
        self.sigmas_ = np.sqrt(gm.covariances_)
        self.chunk_shape_ = tuple(X.shape[1:])
        if y is not None:
            resp = gm.predict_proba(flat)
            table = {}
            for key in dict.fromkeys(y):
                mask = np.asarray([yy == key for yy in y])
                table[key] = (resp[mask].mean(axis=0) / self.weights_).tolist()
            self.obs_table = table
        return self

    @property
    def chunk_shape(self):
        check_is_fitted(self, "means_")
        return self.chunk_shape_

    def component_weights(self, obs=None):
        check_is_fitted(self, "means_")
        key = _obs_key(obs)
        if self.obs_table and key in self.obs_table:
            w = self.weights_ * np.asarray(self.obs_table[key], dtype=float)
            return w / w.sum()
        return self.weights_

    def _stats(self, a, tau, obs):
        a = np.asarray(a, dtype=float)
        lead = a.shape[:-2]
        x = a.reshape(lead + (-1,))
        n = x.shape[-1]
        mu = self.means_
        var = self.sigmas_ ** 2
        V = tau * tau * var + (1.0 - tau) ** 2
        diff = x[..., None, :] - tau * mu
        sq = np.einsum("...kn,...kn->...k", diff, diff)
        logw = np.log(self.component_weights(obs))
        lognk = -0.5 * n * np.log(2 * np.pi * V) - sq / (2 * V)
        joint = logw + lognk
        logp = logsumexp(joint, axis=-1)
        r = np.exp(joint - logp[..., None])
        return x, diff, V, var, r, logp

    def log_density(self, a, tau, obs=None):
        """log p_tau(a) of the noised marginal."""
        tau = check_tau(tau)
        return self._stats(a, tau, obs)[-1]

    def marginal_score(self, a, tau, obs=None):
        """Exact marginal score of the noised mixture, shaped like ``a``."""
        tau = check_tau(tau)
        x, diff, V, _, r, _ = self._stats(a, tau, obs)
        s = -np.einsum("...k,...kn->...n", r / V, diff)
        return s.reshape(np.shape(a))

    def posterior_mean(self, a, tau, obs=None):
        """E[A_1 | A_tau = a] from component responsibilities."""
        tau = check_tau(tau)
        x, diff, V, var, r, _ = self._stats(a, tau, obs)
        c = tau * var / V
        m = self.means_ + c[..., None] * diff
        return np.einsum("...k,...kn->...n", r, m).reshape(np.shape(a))

    def posterior_mean_vjp(self, a, tau, cotangent, obs=None):
        """Product of the posterior-mean Jacobian transpose with ``cotangent``."""
        tau = check_tau(tau)
        x, diff, V, var, r, _ = self._stats(a, tau, obs)
        u = np.asarray(cotangent, dtype=float)
        u = u.reshape(u.shape[:-2] + (-1,))
        c = tau * var / V
        m = self.means_ + c[..., None] * diff
        g = -diff / V[..., None]
        gbar = np.einsum("...k,...kn->...n", r, g)
        mu_dot = np.einsum("...kn,...n->...k", m, u)
        out = np.einsum("...k,...k->...", r, c)[..., None] * u
        out = out + np.einsum("...k,...kn->...n", r * mu_dot, g - gbar[..., None, :])
        return out.reshape(np.shape(cotangent))

    def velocity(self, a, tau, obs=None):
        """Flow velocity ``(E[A_1 | a] - a) / (1 - tau)``."""
        tau = check_tau(tau)
        tau = min(tau, TAU_END)
        a = np.asarray(a, dtype=float)
        return (self.posterior_mean(a, tau, obs) - a) / (1.0 - tau)

    def sample_clean(self, n, rng=None, obs=None):
        """Ancestral samples from the clean mixture, shape (n, H, D)."""
        rng = np.random.default_rng(rng)
        w = self.component_weights(obs)
        comp = rng.choice(len(w), size=n, p=w)
        flat = self.means_[comp] + self.sigmas_[comp, None] * rng.standard_normal((n, self.means_.shape[1]))
        return flat.reshape((n,) + self.chunk_shape_)


def gmm_marginal_score(policy, a_tau, tau, obs=None):
    return policy.marginal_score(a_tau, tau, obs)


def gmm_velocity(policy, a_tau, tau, obs=None):
    return policy.velocity(a_tau, tau, obs)


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, h: 0.5 * (1.0 + np.tanh(0.5 * z))),
}


class MlpFlowPolicy(BaseEstimator):
    """Velocity network trained with the flow-matching regression loss.

    Input is the flattened noisy chunk, the flow time and an optional
    observation embedding (one-hot over observation ids seen in ``fit``, or a
    numeric vector). Trained with plain minibatch SGD at a fixed rate.
    """

    def __init__(self, hidden_layer_sizes=(128, 128), activation="tanh", learning_rate=0.01,
                 epochs=500, batch_size=64, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    @property
    def chunk_shape(self):
        check_is_fitted(self, "coefs_")
        return self.chunk_shape_

    def _init_params(self, n_in, n_out, rng):
        sizes = [n_in] + [int(h) for h in self.hidden_layer_sizes] + [n_out]
        self.coefs_ = []
        self.intercepts_ = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.coefs_.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in))
            self.intercepts_.append(np.zeros(fan_out))

    def _embed(self, obs, batch):
        if self.obs_mode_ == "none":
            return np.zeros(batch + (0,))
        if self.obs_mode_ == "onehot":
            emb = np.zeros(batch + (len(self.classes_),))
            if obs is None:
                return emb
            keys = [obs] if np.ndim(obs) == 0 or isinstance(obs, str) else list(obs)
            if len(keys) == 1:
                key = _obs_key(keys[0])
                if key in self.class_index_:
                    emb[..., self.class_index_[key]] = 1.0
                return emb
            for i, key in enumerate(keys):
                if key in self.class_index_:
                    emb[i, self.class_index_[key]] = 1.0
            return emb
        vec = np.asarray(getattr(obs, "embedding", obs), dtype=float)
        return np.broadcast_to(vec, batch + (self.obs_dim_,))

    def _features(self, a, tau, emb):
        a = np.asarray(a, dtype=float)
        lead = a.shape[:-2]
        flat = a.reshape(lead + (-1,))
        t = np.broadcast_to(np.asarray(tau, dtype=float), lead)[..., None]
        return np.concatenate([flat, t, emb], axis=-1)

    def _forward(self, X):
        act, _ = _ACTIVATIONS[self.activation]
        pre, hid = [], [X]
        h = X
        for i, (W, b) in enumerate(zip(self.coefs_, self.intercepts_)):
            z = h @ W + b
            if i < len(self.coefs_) - 1:
                pre.append(z)
                h = act(z)
                hid.append(h)
            else:
                h = z
        return h, pre, hid

    def _loss_and_grads(self, X, target):
        """Mean squared-norm loss and its parameter gradients."""
        _, dact = _ACTIVATIONS[self.activation]
        out, pre, hid = self._forward(X)
        m = X.shape[0]
        err = out - target
        loss = float(np.sum(err * err) / m)
        delta = 2.0 * err / m
        gW = [None] * len(self.coefs_)
        gb = [None] * len(self.coefs_)
        for i in range(len(self.coefs_) - 1, -1, -1):
            gW[i] = hid[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.coefs_[i].T) * dact(pre[i - 1], hid[i])
        return loss, gW, gb

    def fit(self, X, y=None):
        """Train on chunks ``X`` (n, H, D) with optional observations ``y``."""
        X = check_chunk(X, "X", min_ndim=3)
        if X.shape[0] == 0:
            raise ValueError("dataset is empty")
        rng = np.random.default_rng(self.random_state)
        n = X.shape[0]
        self.chunk_shape_ = tuple(X.shape[1:])
        flat = X.reshape(n, -1)
        if y is None:
            self.obs_mode_ = "none"
            emb = np.zeros((n, 0))
        else:
            y_arr = np.asarray(y, dtype=object)
            if y_arr.ndim == 2:
                self.obs_mode_ = "vector"
                emb = np.asarray(y, dtype=float)
                self.obs_dim_ = emb.shape[1]
            else:
                self.obs_mode_ = "onehot"
                self.classes_ = list(dict.fromkeys(y))
                self.class_index_ = {c: i for i, c in enumerate(self.classes_)}
                emb = np.zeros((n, len(self.classes_)))
                emb[np.arange(n), [self.class_index_[c] for c in y]] = 1.0
        n_in = flat.shape[1] + 1 + emb.shape[1]
        self._init_params(n_in, flat.shape[1], rng)
        self.loss_curve_ = []
        bs = int(self.batch_size)
        for epoch in range(int(self.epochs)):
            order = rng.permutation(n)
            total, count = 0.0, 0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                a1 = flat[idx]
                a0 = rng.standard_normal(a1.shape)
                tau = rng.uniform(0.0, 1.0, size=(len(idx), 1))
                a_tau = (1.0 - tau) * a0 + tau * a1
                feats = np.concatenate([a_tau, tau, emb[idx]], axis=1)
                loss, gW, gb = self._loss_and_grads(feats, a1 - a0)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"training diverged at epoch {epoch}")
                for W, dW, b, db in zip(self.coefs_, gW, self.intercepts_, gb):
                    W -= self.learning_rate * dW
                    b -= self.learning_rate * db
                total += loss * len(idx)
                count += len(idx)
            self.loss_curve_.append(total / count)
            logger.debug("epoch %d loss %.6f", epoch, self.loss_curve_[-1])
        return self

    def velocity(self, a, tau, obs=None):
        check_is_fitted(self, "coefs_")
        tau = check_tau(tau)
        a = np.asarray(a, dtype=float)
        lead = a.shape[:-2]
        feats = self._features(a, tau, self._embed(obs, lead))
        out, _, _ = self._forward(feats)
        return out.reshape(a.shape)


def train_flow_policy(dataset, arch=(128, 128), epochs=500, lr=0.01, seed=0, batch_size=64):
    """Fit an :class:`MlpFlowPolicy` on ``[(obs_id, chunk), ...]``."""
    if not dataset:
        raise ValueError("dataset is empty")
    obs = [o for o, _ in dataset]
    chunks = np.stack([np.asarray(c, dtype=float) for _, c in dataset])
    y = None if all(o is None for o in obs) else obs
    policy = MlpFlowPolicy(hidden_layer_sizes=tuple(arch), learning_rate=lr, epochs=epochs,
                           batch_size=batch_size, random_state=seed)
    return policy.fit(chunks, y)


class LatentDecoder:
    """Maps policy-space chunks to joint-space chunks.

    ``identity`` passes through; ``affine`` computes ``a @ W + b`` row-wise with
    ``W`` of shape (D_latent, D_action) and full column rank.
    """

    def __init__(self, mode="identity", W=None, b=None):
        if mode not in ("identity", "affine"):
            raise ValueError("mode must be 'identity' or 'affine'")
        self.mode = mode
        if mode == "affine":
            W = np.asarray(W, dtype=float)
            if W.ndim != 2:
                raise ValueError("affine decoder needs a 2-D matrix W")
            if np.linalg.matrix_rank(W) != W.shape[1]:
                raise ValueError("W must have full column rank")
            b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=float).reshape(-1)
            if b.shape != (W.shape[1],):
                raise ValueError("offset b must have length D_action")
        self.W = W
        self.b = b

    def output_dim(self, input_dim):
        return input_dim if self.mode == "identity" else self.W.shape[1]

    def decode(self, a):
        a = np.asarray(a, dtype=float)
        if self.mode == "identity":
            return a
        if a.shape[-1] != self.W.shape[0]:
            raise ValueError(f"decoder expects D_latent={self.W.shape[0]}, got {a.shape[-1]}")
        return a @ self.W + self.b

    def pullback(self, g):
        """Transpose map: gradient on the decoded chunk to gradient on the input."""
        g = np.asarray(g, dtype=float)
        if self.mode == "identity":
            return g
        return g @ self.W.T


def decode(dec, a):
    return dec.decode(a)


def policy_to_dict(policy):
    if isinstance(policy, GmmPolicy):
        check_is_fitted(policy, "means_")
        return {
            "format": POLICY_FORMAT, "version": POLICY_VERSION, "kind": "gmm",
            "chunk_shape": list(policy.chunk_shape_),
            "weights": policy.weights_.tolist(), "means": policy.means_.tolist(),
            "sigmas": policy.sigmas_.tolist(), "obs_table": policy.obs_table,
        }
    if isinstance(policy, MlpFlowPolicy):
        check_is_fitted(policy, "coefs_")
        doc = {
            "format": POLICY_FORMAT, "version": POLICY_VERSION, "kind": "mlp",
            "chunk_shape": list(policy.chunk_shape_), "params": policy.get_params(),
            "coefs": [W.tolist() for W in policy.coefs_],
            "intercepts": [b.tolist() for b in policy.intercepts_],
            "obs_mode": policy.obs_mode_, "loss_curve": policy.loss_curve_,
        }
        doc["params"]["hidden_layer_sizes"] = list(policy.hidden_layer_sizes)
        if policy.obs_mode_ == "onehot":
            doc["classes"] = policy.classes_
        if policy.obs_mode_ == "vector":
            doc["obs_dim"] = policy.obs_dim_
        return doc
    raise TypeError(f"cannot serialize {type(policy).__name__}")


def policy_from_dict(doc):
    if doc.get("format") != POLICY_FORMAT:
        raise ValueError("not a flowguide policy document")
    if int(doc.get("version", 0)) > POLICY_VERSION:
        raise ValueError(f"unsupported policy version {doc.get('version')}")
    if doc["kind"] == "gmm":
        return GmmPolicy.from_components(doc["weights"], doc["means"], doc["sigmas"],
                                         doc["chunk_shape"], obs_table=doc.get("obs_table"))
    if doc["kind"] == "mlp":
        params = dict(doc["params"])
        params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
        policy = MlpFlowPolicy(**params)
        policy.coefs_ = [np.asarray(W, dtype=float) for W in doc["coefs"]]
        policy.intercepts_ = [np.asarray(b, dtype=float) for b in doc["intercepts"]]
        policy.chunk_shape_ = tuple(doc["chunk_shape"])
        policy.obs_mode_ = doc["obs_mode"]
        policy.loss_curve_ = doc.get("loss_curve", [])
        if policy.obs_mode_ == "onehot":
            policy.classes_ = doc["classes"]
            policy.class_index_ = {c: i for i, c in enumerate(policy.classes_)}
        if policy.obs_mode_ == "vector":
            policy.obs_dim_ = doc["obs_dim"]
        return policy
    raise ValueError(f"unknown policy kind {doc['kind']!r}")


def save_policy(policy, path):
    with open(path, "w") as fh:
        json.dump(policy_to_dict(policy), fh)


def load_policy(path):
    with open(path) as fh:
        return policy_from_dict(json.load(fh))


_CELL = re.compile(r"^a_(\d+)_(\d+)$")


def read_dataset_csv(path):
    """Read ``obs_id,a_0_0,a_0_1,...`` rows into ``[(obs_id, chunk), ...]``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "obs_id":
            raise ValueError("dataset CSV must start with an obs_id column")
        cells = [_CELL.match(h) for h in header[1:]]
        if not all(cells):
            raise ValueError("chunk columns must be named a_<step>_<dim>")
        idx = [(int(m.group(1)), int(m.group(2))) for m in cells]
        H = max(i for i, _ in idx) + 1
        D = max(j for _, j in idx) + 1
        if len(idx) != H * D:
            raise ValueError("chunk columns do not form a full H x D grid")
        out = []
        for row in reader:
            if not row:
                continue
            chunk = np.empty((H, D))
            for (i, j), val in zip(idx, row[1:]):
                chunk[i, j] = float(val)
            out.append((row[0], chunk))
    return out


def write_dataset_csv(path, dataset):
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    H, D = np.shape(dataset[0][1])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["obs_id"] + [f"a_{i}_{j}" for i in range(H) for j in range(D)])
        for obs, chunk in dataset:
            writer.writerow([obs] + [repr(float(v)) for v in np.asarray(chunk).reshape(-1)])
