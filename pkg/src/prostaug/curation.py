"""Screening and review of generated masks before they enter synthesis.

Automated heuristics reject obviously unrealistic masks (disconnected glands,
implausible area, ragged outline, border contact); a human reviewer can
override automatic verdicts through the HTTP API consumed by the review UI.
All state changes go through an append-only NDJSON ledger so the store can be
rebuilt by replay.
"""

from __future__ import annotations

import base64
import datetime
import io
import json
import threading
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.morphology import convex_hull_image

VERDICTS = ("pending", "accepted", "rejected")
_EIGHT_CONN = np.ones((3, 3), dtype=int)


class IllegalTransition(ValueError):
    """Verdict change not allowed by the transition rules."""


@dataclass
class ScreenBounds:
    area_lo: float = 0.005
    area_hi: float = 0.25
    min_solidity: float = 0.85


@dataclass
class RealismReport:
    n_components: int
    area_frac: float
    solidity: float
    touches_border: bool
    auto_verdict: str  # accept | reject
    reject_reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskCandidate:
    id: str
    mask: np.ndarray
    report: RealismReport
    verdict: str = "pending"
    verdict_source: str | None = None  # auto | human
    created_at: str = ""
    decided_at: str | None = None


def heuristic_screen(mask: np.ndarray, bounds: ScreenBounds) -> RealismReport:
    """Accept a mask only if it is one compact blob of plausible size.

    Rejection reasons (all violated rules are listed): empty, disconnected,
    area_out_of_bounds, low_solidity, touches_border.
    """
    mask = np.asarray(mask)
    vals = np.unique(mask)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask must be binary, found values {vals[:10]}")
    mask = mask.astype(bool)

    _, n_components = ndimage.label(mask, structure=_EIGHT_CONN)
    area = int(mask.sum())
    area_frac = area / mask.size
    if area > 0:
        hull_area = int(convex_hull_image(mask).sum())
        solidity = area / hull_area
    else:
        solidity = 0.0
    touches_border = bool(
        mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any()
    )

    reasons = []
    if n_components == 0:
        reasons.append("empty")
    elif n_components > 1:
        reasons.append("disconnected")
    if not (bounds.area_lo <= area_frac <= bounds.area_hi):
        reasons.append("area_out_of_bounds")
    if area > 0 and solidity < bounds.min_solidity:
        reasons.append("low_solidity")
    if touches_border:
        reasons.append("touches_border")

    return RealismReport(
        n_components=int(n_components),
        area_frac=float(area_frac),
        solidity=float(solidity),
        touches_border=touches_border,
        auto_verdict="reject" if reasons else "accept",
        reject_reasons=reasons,
    )


def fit_area_bounds(real_masks: list[np.ndarray]) -> dict[str, float]:
    """Area band grounded in real-mask statistics: [0.5*min, 2*max], kept in (0,1)."""
    areas = [np.asarray(m).astype(bool).mean() for m in real_masks if np.asarray(m).any()]
    if len(areas) < 10:
        raise ValueError(f"need >= 10 nonempty real masks, got {len(areas)}")
    lo = max(0.5 * min(areas), 1e-6)
    hi = min(2.0 * max(areas), 1.0 - 1e-6)
    return {"area_lo": float(lo), "area_hi": float(hi)}


# ---------------------------------------------------------------------------
# Mask <-> PNG helpers
# ---------------------------------------------------------------------------

def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((np.asarray(mask).astype(np.uint8) * 255), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def image_to_png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_mask(data: bytes) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
    return (arr > 127).astype(np.uint8)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class CurationStore:
    """Candidate index derived from an append-only event ledger.

    Verdict rules: pending -> accepted/rejected by any source; a human may
    override an automatic verdict once; everything else is illegal. Writes are
    serialized by a lock and each event is one flushed NDJSON line.
    """

    def __init__(self, ledger_path: Path | str | None = None):
        self.ledger_path = Path(ledger_path) if ledger_path else None
        self.candidates: dict[str, MaskCandidate] = {}
        self.previews: dict[str, bytes] = {}
        self._lock = threading.Lock()
        if self.ledger_path and self.ledger_path.exists():
            self._replay()

    def _replay(self) -> None:
        for line in self.ledger_path.read_text().splitlines():
            if line.strip():
                self._apply(json.loads(line))

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "ingest":
            report = RealismReport(**event["report"])
            self.candidates[event["id"]] = MaskCandidate(
                id=event["id"],
                mask=png_bytes_to_mask(base64.b64decode(event["mask_png"])),
                report=report,
                verdict=event["verdict"],
                verdict_source=event["verdict_source"],
                created_at=event["created_at"],
                decided_at=event.get("decided_at"),
            )
        elif kind == "verdict":
            cand = self.candidates[event["id"]]
            cand.verdict = event["verdict"]
            cand.verdict_source = event["source"]
            cand.decided_at = event["decided_at"]
        elif kind == "preview":
            self.previews[event["id"]] = base64.b64decode(event["png"])
        else:
            raise ValueError(f"unknown ledger event type {kind!r}")

    def _append(self, event: dict) -> None:
        self._apply(event)
        if self.ledger_path:
            with self.ledger_path.open("a") as f:
                f.write(json.dumps(event) + "\n")
                f.flush()

    def ingest_candidates(
        self,
        masks: list[np.ndarray],
        bounds: ScreenBounds,
        ids: list[str] | None = None,
        auto_apply: bool = True,
    ) -> list[MaskCandidate]:
        """Screen and register masks; auto_apply=False leaves them pending for review."""
        if ids is None:
            start = len(self.candidates)
            ids = [f"cand{start + i:05d}" for i in range(len(masks))]
        if len(ids) != len(set(ids)):
            raise ValueError("candidate ids must be unique")
        dup = set(ids) & set(self.candidates)
        if dup:
            raise ValueError(f"candidate ids already ingested: {sorted(dup)[:5]}")

        out = []
        with self._lock:
            for cid, mask in zip(ids, masks):
                report = heuristic_screen(mask, bounds)
                now = _now()
                if auto_apply:
                    verdict = "accepted" if report.auto_verdict == "accept" else "rejected"
                    source, decided = "auto", now
                else:
                    verdict, source, decided = "pending", None, None
                self._append(
                    {
                        "type": "ingest",
                        "id": cid,
                        "mask_png": base64.b64encode(mask_to_png_bytes(mask)).decode(),
                        "report": report.to_dict(),
                        "verdict": verdict,
                        "verdict_source": source,
                        "created_at": now,
                        "decided_at": decided,
                    }
                )
                out.append(self.candidates[cid])
        return out

    def list_candidates(self, status: str | None = None) -> list[MaskCandidate]:
        if status is not None and status not in VERDICTS:
            raise ValueError(f"unknown status {status!r}")
        items = sorted(self.candidates.values(), key=lambda c: c.id)
        if status is None:
            return items
        return [c for c in items if c.verdict == status]

    def set_verdict(self, cid: str, verdict: str, source: str) -> MaskCandidate:
        if verdict not in ("accepted", "rejected"):
            raise ValueError(f"verdict must be accepted or rejected, got {verdict!r}")
        if source not in ("auto", "human"):
            raise ValueError(f"source must be auto or human, got {source!r}")
        with self._lock:
            if cid not in self.candidates:
                raise KeyError(cid)
            cand = self.candidates[cid]
            legal = cand.verdict == "pending" or (
                source == "human" and cand.verdict_source == "auto"
            )
            if not legal:
                raise IllegalTransition(
                    f"{cid}: {cand.verdict} ({cand.verdict_source}) -> {verdict} ({source})"
                )
            self._append(
                {
                    "type": "verdict",
                    "id": cid,
                    "verdict": verdict,
                    "source": source,
                    "prior_verdict": cand.verdict,
                    "prior_source": cand.verdict_source,
                    "decided_at": _now(),
                }
            )
            return self.candidates[cid]

    def attach_preview(self, cid: str, image: np.ndarray) -> None:
        """Store a synthesized T2 preview for the review UI."""
        with self._lock:
            if cid not in self.candidates:
                raise KeyError(cid)
            self._append(
                {
                    "type": "preview",
                    "id": cid,
                    "png": base64.b64encode(image_to_png_bytes(image)).decode(),
                }
            )

    def export_accepted(self) -> list[tuple[str, np.ndarray]]:
        """(id, mask) pairs for every accepted candidate, in id order."""
        return [(c.id, c.mask) for c in self.list_candidates("accepted")]

    def stats(self) -> dict[str, int]:
        counts = {v: 0 for v in VERDICTS}
        for c in self.candidates.values():
            counts[c.verdict] += 1
        return counts


# ---------------------------------------------------------------------------
# HTTP API (consumed by the review UI)
# ---------------------------------------------------------------------------

def candidate_record(cand: MaskCandidate) -> dict:
    return {
        "id": cand.id,
        "report": cand.report.to_dict(),
        "verdict": cand.verdict,
        "verdict_source": cand.verdict_source,
        "created_at": cand.created_at,
        "decided_at": cand.decided_at,
    }


def create_app(store: CurationStore, static_dir: Path | str | None = None):
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import Response
    from pydantic import BaseModel

    class VerdictBody(BaseModel):
        verdict: str

    app = FastAPI(title="mask curation")

    @app.get("/api/candidates")
    def get_candidates(status: str | None = None):
        try:
            items = store.list_candidates(status)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"items": [candidate_record(c) for c in items]}

    @app.get("/api/candidates/{cid}/mask.png")
    def get_mask(cid: str):
        if cid not in store.candidates:
            raise HTTPException(status_code=404, detail="unknown candidate")
        return Response(mask_to_png_bytes(store.candidates[cid].mask), media_type="image/png")

    @app.get("/api/candidates/{cid}/preview.png")
    def get_preview(cid: str):
        if cid not in store.candidates:
            raise HTTPException(status_code=404, detail="unknown candidate")
        if cid not in store.previews:
            raise HTTPException(status_code=404, detail="no preview available")
        return Response(store.previews[cid], media_type="image/png")

    @app.post("/api/candidates/{cid}/verdict")
    def post_verdict(cid: str, body: VerdictBody):
        if body.verdict not in ("accepted", "rejected"):
            raise HTTPException(status_code=422, detail="verdict must be accepted or rejected")
        try:
            cand = store.set_verdict(cid, body.verdict, source="human")
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown candidate")
        except IllegalTransition as e:
            raise HTTPException(status_code=409, detail=str(e))
        return candidate_record(cand)

    @app.get("/api/stats")
    def get_stats():
        return store.stats()

    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
