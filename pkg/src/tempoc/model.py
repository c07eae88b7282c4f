"""Two-branch restoration network with a recurrent bottleneck.

Each step consumes a triplet of processed frames. The content branch
encodes the channel-concatenated triplet, the motion branch runs two
shared-weight flow passes (center to previous, center to next) and encodes
the concatenated fields, and the fused features pass through residual
blocks and a ConvLSTM before being decoded with skip connections from the
content stream. The head predicts a residual on the center frame and is
zero-initialized, so a fresh model is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation
from .flow import FlowEstimator, PyramidFlowNet
from .video import Role, VideoSequence


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell with spatial hidden/cell state."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel: int = 3):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, kernel, padding=kernel // 2)

    def forward(self, x, state):
        h, c = state
        i, f, g, o = torch.chunk(self.gates(torch.cat([x, h], dim=1)), 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


def _down(cin: int, cout: int) -> nn.Module:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.1, inplace=True))


def _merge(cin: int, cout: int) -> nn.Module:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.1, inplace=True))


@dataclass
class RecurrentState:
    """ConvLSTM hidden and cell maps at bottleneck resolution, one clip each."""

    hidden: torch.Tensor
    cell: torch.Tensor


class ConsistencyModel(nn.Module):
    """Frame-recurrent flicker-correction network.

    The flow estimator is a single submodule used for both motion passes,
    so its weights are shared by construction.
    """

    STRIDE = 8

    def __init__(self, flow_net: FlowEstimator | None = None, widths: tuple[int, int, int] = (32, 64, 128), bottleneck_blocks: int = 4):
        super().__init__()
        c1, c2, c3 = widths
        self.flow_net = flow_net if flow_net is not None else PyramidFlowNet()

        self.content_down1 = _down(9, c1)
        self.content_down2 = _down(c1, c2)
        self.content_down3 = _down(c2, c3)

        self.motion_down1 = _down(4, c1)
        self.motion_down2 = _down(c1, c2)
        self.motion_down3 = _down(c2, c3)

        self.fuse = _merge(2 * c3, c3)
        self.bottleneck = nn.Sequential(*[ResidualBlock(c3) for _ in range(bottleneck_blocks)])
        self.convlstm = ConvLSTMCell(c3, c3)

        self.up2 = _merge(c3 + c2, c2)
        self.up1 = _merge(c2 + c1, c1)
        self.up0 = _merge(c1, c1 // 2)
        self.head = nn.Conv2d(c1 // 2, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "content_encoder": [*self.content_down1.parameters(), *self.content_down2.parameters(), *self.content_down3.parameters()],
            "motion_encoder": [*self.motion_down1.parameters(), *self.motion_down2.parameters(), *self.motion_down3.parameters()],
            "flow_net": list(self.flow_net.parameters()),
            "bottleneck": [*self.fuse.parameters(), *self.bottleneck.parameters(), *self.convlstm.parameters()],
            "decoder": [*self.up2.parameters(), *self.up1.parameters(), *self.up0.parameters(), *self.head.parameters()],
        }
        return groups

    def init_state(self, batch: int, height: int, width: int, device=None, dtype=None) -> RecurrentState:
        hp = height + (-height) % self.STRIDE
        wp = width + (-width) % self.STRIDE
        channels = self.convlstm.hidden_channels
        ref = next(self.parameters())
        device = device or ref.device
        dtype = dtype or ref.dtype
        zeros = torch.zeros(batch, channels, hp // self.STRIDE, wp // self.STRIDE, device=device, dtype=dtype)
        return RecurrentState(zeros, zeros.clone())

    def forward_step(
        self,
        p_prev: torch.Tensor,
        p_curr: torch.Tensor,
        p_next: torch.Tensor,
        state: RecurrentState | None = None,
    ) -> tuple[torch.Tensor, RecurrentState]:
        """Restore the center frame of a triplet and advance the recurrent state."""
        squeeze = p_curr.dim() == 3
        if squeeze:
            p_prev, p_curr, p_next = p_prev.unsqueeze(0), p_curr.unsqueeze(0), p_next.unsqueeze(0)
        if p_prev.shape != p_curr.shape or p_next.shape != p_curr.shape:
            raise ContractViolation("triplet frames must share one shape")

        b, _, h, w = p_curr.shape
        pad_h = (-h) % self.STRIDE
        pad_w = (-w) % self.STRIDE
        if pad_h or pad_w:
            pad = (0, pad_w, 0, pad_h)
            p_prev = F.pad(p_prev, pad, mode="reflect")
            p_curr_pad = F.pad(p_curr, pad, mode="reflect")
            p_next = F.pad(p_next, pad, mode="reflect")
        else:
            p_curr_pad = p_curr
        if state is None:
            state = self.init_state(b, h, w, device=p_curr.device, dtype=p_curr.dtype)

        # one batched call covers both shared-weight passes
        flows = self.flow_net.estimate(
            torch.cat([p_curr_pad, p_curr_pad], dim=0), torch.cat([p_prev, p_next], dim=0)
        )
        flow_prev, flow_next = flows.chunk(2, dim=0)

        c1 = self.content_down1(torch.cat([p_prev, p_curr_pad, p_next], dim=1))
        c2 = self.content_down2(c1)
        c3 = self.content_down3(c2)

        m = self.motion_down3(self.motion_down2(self.motion_down1(torch.cat([flow_prev, flow_next], dim=1))))

        x = self.bottleneck(self.fuse(torch.cat([c3, m], dim=1)))
        hidden, cell = self.convlstm(x, (state.hidden, state.cell))

        d2 = self.up2(torch.cat([F.interpolate(hidden, scale_factor=2, mode="nearest"), c2], dim=1))
        d1 = self.up1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), c1], dim=1))
        residual = self.head(self.up0(F.interpolate(d1, scale_factor=2, mode="nearest")))
        if pad_h or pad_w:
            residual = residual[:, :, :h, :w]

        out = (p_curr + residual).clamp(0.0, 1.0)
        if squeeze:
            out = out.squeeze(0)
        return out, RecurrentState(hidden, cell)

    def process_window(self, frames: torch.Tensor) -> torch.Tensor:
        """Run the recurrence over a (B, T, 3, H, W) window, gradients attached.

        The first frame passes through unchanged; the final step replicates
        the last frame as its missing successor. The recurrent state starts
        at zero for every window.
        """
        if frames.dim() != 5 or frames.shape[1] < 3:
            raise ContractViolation(f"need a (B, T>=3, 3, H, W) window, got {tuple(frames.shape)}")
        b, t = frames.shape[:2]
        state = None
        outputs = [frames[:, 0]]
        for k in range(1, t):
            nxt = frames[:, k + 1] if k + 1 < t else frames[:, k]
            out, state = self.forward_step(frames[:, k - 1], frames[:, k], nxt, state)
            outputs.append(out)
        return torch.stack(outputs, dim=1)

    def process_sequence(self, video: VideoSequence) -> VideoSequence:
        """Restore a whole clip (inference entry point; no gradients)."""
        if len(video) < 3:
            raise ContractViolation(f"need at least 3 frames, got {len(video)}")
        with torch.no_grad():
            out = self.process_window(video.frames.unsqueeze(0)).squeeze(0)
        return VideoSequence(out, Role.OUTPUT, video.clip_id)
