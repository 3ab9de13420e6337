"""Reverse-mode gradient tape over integer value slots."""
from collections import defaultdict


class TapeError(RuntimeError):
    pass


class GradTape:
    """Records one backward closure per forward op.

    Values are referred to by integer slots handed out by :meth:`watch` and
    :meth:`push`. A closure receives the gradient of its output slot and
    returns ``(input_grads, param_grads)``.
    """

    def __init__(self):
        self._entries = []
        self._next_slot = 0
        self._input_slot = None
        self.visited = []
        self.input_grad = None

    def _slot(self):
        s = self._next_slot
        self._next_slot += 1
        return s

    def watch(self):
        """Register the network input; returns its slot."""
        self._input_slot = self._slot()
        return self._input_slot

    def push(self, name, inputs, backward):
        out = self._slot()
        self._entries.append((name, tuple(inputs), out, backward))
        return out

    def __len__(self):
        return len(self._entries)

    def backward(self, loss_grad, output_slot=None):
        if not self._entries:
            raise TapeError("backward called before any forward op was recorded")
        if output_slot is None:
            output_slot = self._entries[-1][2]
        grads = {output_slot: loss_grad}
        pgrads = defaultdict(lambda: 0)
        self.visited = []
        for name, inputs, out, fn in reversed(self._entries):
            self.visited.append(name)
            g = grads.pop(out, None)
            if g is None:
                continue
            in_grads, p = fn(g)
            for slot, gi in zip(inputs, in_grads):
                if gi is None:
                    continue
                grads[slot] = grads[slot] + gi if slot in grads else gi
            for k, v in p.items():
                pgrads[k] = pgrads[k] + v
        self.input_grad = grads.get(self._input_slot)
        return dict(pgrads)


def backward(tape: GradTape, loss_grad):
    """Parameter gradients for everything recorded on ``tape``."""
    return tape.backward(loss_grad)
