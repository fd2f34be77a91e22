"""Full dual-stream detector, its ablation variants and the two fusion baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from ..errors import SpecError
from ..signal.features import EPS_NORM, NormStats
from . import core
from .fusion import CrossCondition, FusionMoE, LowRankBilinear, TokenPool
from .impact import ImpactEncoder, ImpactToken
from .layers import AttnPool, Linear
from .motion import MoeConfig, MotionEncoder, SsmConfig

MODALITIES = ("radar", "vibration")


@dataclass
class AblationSpec:
    """Architecture toggles. ``fusion`` picks the full model or one of the two baselines."""

    lsk: bool = True
    lr_temporal: bool = True
    reweight: bool = True
    stream_moe: bool = True
    cross_condition: bool = True
    mlb: bool = True
    fusion_moe: bool = True
    modalities: tuple = MODALITIES
    fusion: str = "model"            # model | early_concat | late_average

    def validate(self) -> "AblationSpec":
        mods = tuple(self.modalities)
        if not mods or any(m not in MODALITIES for m in mods) or len(set(mods)) != len(mods):
            raise SpecError(f"bad modality set {mods}")
        if self.fusion not in ("model", "early_concat", "late_average"):
            raise SpecError(f"unknown fusion mode {self.fusion!r}")
        if len(mods) == 1 and (self.cross_condition or self.mlb or self.fusion_moe):
            raise SpecError("fusion components enabled with a single modality")
        if len(mods) == 1 and self.fusion != "model":
            raise SpecError("fusion baselines need both modalities")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "modalities" in d:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)


UNIMODAL = dict(cross_condition=False, mlb=False, fusion_moe=False)

ABLATIONS = {
    "full": AblationSpec(),
    "early_concat": AblationSpec(fusion="early_concat"),
    "late_average": AblationSpec(fusion="late_average"),
    "no_cross_condition": AblationSpec(cross_condition=False),
    "vibration_only": AblationSpec(modalities=("vibration",), **UNIMODAL),
    "radar_only": AblationSpec(modalities=("radar",), **UNIMODAL),
    "no_lsk": AblationSpec(lsk=False),
    "no_lr_temporal": AblationSpec(lr_temporal=False),
    "no_reweight": AblationSpec(reweight=False),
    "no_stream_moe": AblationSpec(stream_moe=False),
    "no_mlb": AblationSpec(mlb=False),
    "no_fusion_moe": AblationSpec(fusion_moe=False),
}


@dataclass
class ModelConfig:
    channels: int = 64
    d_state: int = 64
    expansion: int = 2
    ssm_layers: int = 2
    experts: int = 4
    temporal_window: int = 7
    cross_radius: int = 6
    rank: int = 8
    mlb_d: int = 32
    mlb_k: int = 4


class _Normalizer(nn.Module):
    """Robust per-channel scaling stored as buffers so checkpoints carry it."""

    def __init__(self, vib_ch: int = 3, radar_ch: int = 5):
        super().__init__()
        self.register_buffer("vib_median", torch.zeros(vib_ch))
        self.register_buffer("vib_iqr", torch.ones(vib_ch))
        self.register_buffer("radar_median", torch.zeros(radar_ch))
        self.register_buffer("radar_iqr", torch.ones(radar_ch))

    def set(self, vib: NormStats, radar: NormStats):
        for name, st in (("vib", vib), ("radar", radar)):
            getattr(self, f"{name}_median").copy_(torch.as_tensor(np.asarray(st.median), dtype=torch.float32))
            getattr(self, f"{name}_iqr").copy_(torch.as_tensor(np.asarray(st.iqr), dtype=torch.float32))

    def forward(self, vib, radar):
        v = (vib - self.vib_median.to(vib.dtype)) / self.vib_iqr.to(vib.dtype).clamp_min(EPS_NORM)
        r = (radar - self.radar_median.to(radar.dtype)) / self.radar_iqr.to(radar.dtype).clamp_min(EPS_NORM)
        return v, r


class FallFusionNet(nn.Module):
    """Maps raw windows (vib (B,256,3), radar (B,256,5)) to fall logits."""

    def __init__(self, cfg: ModelConfig | None = None, spec: AblationSpec | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.spec = spec = (spec or AblationSpec()).validate()
        C = cfg.channels
        self.norm = _Normalizer()
        use_r = "radar" in spec.modalities
        use_v = "vibration" in spec.modalities
        self.fusion_mode = spec.fusion

        if spec.fusion == "early_concat":
            self.cnn = nn.ModuleList([nn.Conv1d(8 if i == 0 else C, C, 7, stride=2, padding=3) for i in range(3)])
            self.head = Linear(C, 1)
            return

        ssm = SsmConfig(cfg.d_state, cfg.expansion, 5, cfg.ssm_layers)
        moe = MoeConfig(cfg.experts, 1, cfg.temporal_window)
        self.motion = MotionEncoder(C, 5, ssm, moe, spec.lsk, spec.lr_temporal, spec.stream_moe) if use_r else None
        self.impact = ImpactEncoder(C, 3, cfg.rank, spec.lsk, spec.lr_temporal, spec.reweight) if use_v else None

        if spec.fusion == "late_average":
            self.motion_pool, self.impact_pool = AttnPool(C), ImpactToken(C)
            self.head_r, self.head_v = Linear(C, 1), Linear(C, 1)
            return
        if use_r and use_v:
            self.xcond = CrossCondition(C, cfg.cross_radius) if spec.cross_condition else None
            self.pool = TokenPool(C)
            if spec.mlb:
                self.mlb = LowRankBilinear(C, cfg.mlb_d, cfg.mlb_k)
            else:
                self.concat_proj = Linear(2 * C, C)
            self.fmoe = FusionMoE(C, cfg.experts) if spec.fusion_moe else None
        elif use_r:
            self.motion_pool = AttnPool(C)
        else:
            self.impact_pool = ImpactToken(C)
        self.head = Linear(C, 1)

    def set_normalization(self, vib: NormStats, radar: NormStats):
        self.norm.set(vib, radar)

    def bilinear_factors(self):
        mlb = getattr(self, "mlb", None)
        return (mlb.U, mlb.V) if mlb is not None else (None, None)

    def forward(self, vib, radar) -> dict:
        v, r = self.norm(vib, radar)
        zero = v.new_zeros(())
        if self.fusion_mode == "early_concat":
            h = torch.cat([v, r], dim=-1).transpose(-1, -2)
            for conv in self.cnn:
                h = core.silu(conv(h))
            return {"logits": self.head(h.mean(-1)).squeeze(-1), "aux": [zero]}

        aux = []
        expert = None
        Y = H = None
        if self.motion is not None:
            Y, a, _ = self.motion(r)
            aux.append(a)
        if self.impact is not None:
            H = self.impact(v)

        if self.fusion_mode == "late_average":
            lr = self.head_r(self.motion_pool(Y)).squeeze(-1)
            lv = self.head_v(self.impact_pool(H)).squeeze(-1)
            p = 0.5 * (torch.sigmoid(lr) + torch.sigmoid(lv))
            logit = torch.log(p) - torch.log1p(-p)
            return {"logits": logit, "aux": aux, "branch_logits": (lr, lv)}

        if Y is not None and H is not None:
            Ys, Hs = self.xcond(Y, H) if self.xcond is not None else (Y, H)
            m, i = self.pool(Ys, Hs)
            z = self.mlb(m, i) if hasattr(self, "mlb") else self.concat_proj(torch.cat([m, i], dim=-1))
            if self.fmoe is not None:
                f = self.fmoe(m, i, z)
                tok = f["token"]
                aux.append(f["aux_loss"])
                expert = f["expert_id"]
            else:
                tok = z
        elif Y is not None:
            tok = self.motion_pool(Y)
        else:
            tok = self.impact_pool(H)
        return {"logits": self.head(tok).squeeze(-1), "aux": aux or [zero], "expert_id": expert}

    @torch.no_grad()
    def predict_proba(self, vib, radar, batch_size: int = 128) -> np.ndarray:
        self.eval()
        vib = torch.as_tensor(np.asarray(vib), dtype=torch.float32)
        radar = torch.as_tensor(np.asarray(radar), dtype=torch.float32)
        out = []
        for s in range(0, vib.shape[0], batch_size):
            out.append(torch.sigmoid(self(vib[s:s + batch_size], radar[s:s + batch_size])["logits"]))
        return torch.cat(out).double().numpy() if out else np.zeros(0)


def build_model(spec: AblationSpec | None = None, cfg: ModelConfig | None = None, seed: int = 0) -> FallFusionNet:
    torch.manual_seed(seed)
    return FallFusionNet(cfg, spec)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
