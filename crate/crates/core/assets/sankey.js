// Minimal SVG renderer for the tree Sankey documents. Columns are tree
// depths; siblings are stacked top to bottom in descending probability and
// band widths follow the path probability of each node.
(function () {
  "use strict";
  var NS = "http://www.w3.org/2000/svg";

  function el(name, attrs) {
    var e = document.createElementNS(NS, name);
    for (var k in attrs) e.setAttribute(k, attrs[k]);
    return e;
  }

  function render(doc, host) {
    var W = 220, H = 600, PAD = 8, BAR = 14;
    var byId = {}, kids = {}, depth = {}, mass = {};
    doc.nodes.forEach(function (n) { byId[n.id] = n; kids[n.id] = []; });
    var incoming = {};
    doc.links.forEach(function (l) {
      kids[l.source].push(l);
      incoming[l.target] = l;
    });
    var roots = doc.nodes.filter(function (n) { return !incoming[n.id]; });
    var maxDepth = 0;
    function place(id, d, m) {
      depth[id] = d; mass[id] = m;
      if (d > maxDepth) maxDepth = d;
      kids[id].forEach(function (l) { place(l.target, d + 1, m * l.value); });
    }
    roots.forEach(function (r) { place(r.id, 0, 1); });

    var svg = el("svg", { width: (maxDepth + 1) * W + 2 * PAD, height: H + 2 * PAD });
    if (!doc.nodes.length) {
      host.appendChild(svg);
      return;
    }
    var y = {};
    function layout(id, top) {
      y[id] = top;
      var t = top;
      kids[id].forEach(function (l) {
        layout(l.target, t);
        t += mass[l.target] * H;
      });
    }
    var top = 0;
    roots.forEach(function (r) { layout(r.id, top); top += H; });

    doc.links.forEach(function (l) {
      var x0 = PAD + depth[l.source] * W + BAR, x1 = PAD + depth[l.target] * W;
      var t = PAD + y[l.target], h = Math.max(mass[l.target] * H, 1);
      var p = el("rect", { x: x0, y: t, width: x1 - x0, height: h, fill: byId[l.target].color, "fill-opacity": 0.35 });
      var title = el("title", {});
      title.textContent = byId[l.source].label + " \u2192 " + byId[l.target].label + ": " + l.value.toFixed(4);
      p.appendChild(title);
      svg.appendChild(p);
    });
    doc.nodes.forEach(function (n) {
      var x = PAD + depth[n.id] * W, top = PAD + y[n.id], h = Math.max(mass[n.id] * H, 1);
      svg.appendChild(el("rect", { x: x, y: top, width: BAR, height: h, fill: n.color }));
      var label = el("text", { x: x + BAR + 3, y: top + Math.min(h / 2, 12) + 4, "font-size": 11, "font-family": "sans-serif" });
      label.textContent = n.label;
      svg.appendChild(label);
    });
    host.appendChild(svg);
  }

  var data = JSON.parse(document.getElementById("sankey-data").textContent);
  render(data, document.getElementById("sankey"));
})();
