"""Writes the example model graphs and their hand-summed accounting tables.

The per-layer arithmetic here is written out independently of the Rust
accounting code; the integration tests compare the two.
FLOPs: 2 per multiply-accumulate. Pool/activation layers cost nothing.
"""
import csv
import json
from pathlib import Path

HERE = Path(__file__).parent


def conv_out(h, k, s, p):
    return (h + 2 * p - k) // s + 1


class Builder:
    def __init__(self, c, h, w):
        self.input = {"channels": c, "height": h, "width": w}
        self.layers = [{"id": "input", "kind": "input"}]
        self.edges = []
        self.rows = []  # (id, kind, params, flops)
        self.shape = {"input": (c, h, w)}
        self.rows.append(("input", "input", 0, 0))

    def add(self, layer, producers, params, flops, shape):
        self.layers.append(layer)
        for p in producers:
            self.edges.append([p, layer["id"]])
        self.rows.append((layer["id"], layer["kind"], params, flops))
        self.shape[layer["id"]] = shape
        return layer["id"]

    def conv(self, lid, src, out, k, stride=1, bias=False, prunable=True):
        c, h, w = self.shape[src]
        pad = k // 2
        ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
        params = out * c * k * k + (out if bias else 0)
        flops = 2 * out * ho * wo * c * k * k
        layer = {"id": lid, "kind": "conv", "in": c, "out": out, "kernel": k,
                 "stride": stride, "bias": bias, "prunable": prunable}
        return self.add(layer, [src], params, flops, (out, ho, wo))

    def bn(self, lid, src):
        c, h, w = self.shape[src]
        return self.add({"id": lid, "kind": "batchnorm"}, [src], 2 * c, 2 * c * h * w, (c, h, w))

    def relu(self, lid, src):
        return self.add({"id": lid, "kind": "activation"}, [src], 0, 0, self.shape[src])

    def pool(self, lid, src, k=None, global_=False):
        c, h, w = self.shape[src]
        if global_:
            layer, shape = {"id": lid, "kind": "pool", "global": True}, (c, 1, 1)
        else:
            layer, shape = {"id": lid, "kind": "pool", "kernel": k}, (c, conv_out(h, k, k, 0), conv_out(w, k, k, 0))
        return self.add(layer, [src], 0, 0, shape)

    def add_join(self, lid, a, b):
        c, h, w = self.shape[a]
        assert self.shape[b] == (c, h, w)
        return self.add({"id": lid, "kind": "add_join"}, [a, b], 0, c * h * w, (c, h, w))

    def linear(self, lid, src, out, bias=True):
        c, h, w = self.shape[src]
        fan_in = c * h * w
        layer = {"id": lid, "kind": "linear", "in": fan_in, "out": out, "bias": bias}
        return self.add(layer, [src], fan_in * out + (out if bias else 0), 2 * fan_in * out, (out, 1, 1))

    def output(self, src):
        return self.add({"id": "output", "kind": "output"}, [src], 0, 0, self.shape[src])

    def write(self, name, groups=()):
        doc = {"format_version": "1", "input": self.input, "layers": self.layers,
               "edges": self.edges, "groups": list(groups)}
        (HERE / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")
        with open(HERE / f"{name}.counts.csv", "w", newline="") as f:
            out = csv.writer(f, lineterminator="\n")
            out.writerow(["layer_id", "kind", "params", "flops"])
            for row in self.rows:
                out.writerow(row)
            out.writerow(["TOTAL", "", sum(r[2] for r in self.rows), sum(r[3] for r in self.rows)])


def vgg16():
    g = Builder(3, 32, 32)
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
    src, i = "input", 0
    for v in cfg:
        if v == "M":
            src = g.pool(f"pool{i}", src, k=2)
            continue
        i += 1
        src = g.conv(f"conv{i}", src, v, 3)
        src = g.bn(f"bn{i}", src)
        src = g.relu(f"relu{i}", src)
    src = g.pool("avgpool", src, k=2)
    src = g.linear("fc", src, 10)
    g.output(src)
    g.write("vgg16_cifar")


def bottleneck(name, h, planes=16, blocks=3):
    g = Builder(3, h, h)
    src = g.relu("stem_relu", g.bn("stem_bn", g.conv("stem", "input", 16, 3)))
    width = planes * 4
    adds = []
    for b in range(1, blocks + 1):
        x = g.relu(f"b{b}_relu1", g.bn(f"b{b}_bn1", g.conv(f"b{b}_conv1", src, planes, 1)))
        x = g.relu(f"b{b}_relu2", g.bn(f"b{b}_bn2", g.conv(f"b{b}_conv2", x, planes, 3)))
        x = g.bn(f"b{b}_bn3", g.conv(f"b{b}_conv3", x, width, 1))
        if b == 1:
            shortcut = g.bn("b1_proj_bn", g.conv("b1_proj", src, width, 1))
        else:
            shortcut = src
        src = g.add_join(f"b{b}_add", x, shortcut)
        adds.append(src)
        src = g.relu(f"b{b}_out", src)
    src = g.pool("gap", src, global_=True)
    src = g.linear("fc", src, 10)
    g.output(src)
    groups = [
        {"name": "stage1_internal", "kind": "sequential_internal",
         "members": [f"b{b}_conv{k}" for b in range(1, blocks + 1) for k in (1, 2)]},
        {"name": "stage1_last", "kind": "post_addition", "members": adds},
    ]
    g.write(name, groups)


if __name__ == "__main__":
    vgg16()
    bottleneck("bottleneck_stage", 32)
