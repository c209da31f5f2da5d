import os
import logging
from datetime import datetime, timezone

from flask import Flask, request, jsonify
from flask_cors import CORS

from builtin_graphs import BUILTINS, get_builtin
from constants import DEFAULTS, ENV, TOLERANCES
from distributions import DISTRIBUTIONS
from errors import SCGError
from estimator import BaselineSpec, estimate, parse_baseline, resolve_theta
from graph_model import load_graph, validate_differentiability
from oracle import exact_expectation, exact_gradient
from tensor_ops import OPS

logger = logging.getLogger(__name__)

app = Flask(__name__)
CORS(app)

# Upper bound on samples per HTTP request
MAX_SAMPLES = 10**5


def _load_request_graph(data):
    """Graph, inputs and the example's own baselines (if any) from a request body."""
    if data.get('builtin'):
        example = get_builtin(data['builtin'])
        graph, inputs = example.load()
    elif data.get('graph'):
        example = None
        graph, inputs = load_graph(data['graph'])
    else:
        raise ValueError("Request needs either 'builtin' or 'graph'")
    if data.get('inputs'):
        overrides = {graph.resolve(k): v for k, v in data['inputs'].items()}
        inputs = graph.normalize_inputs({**inputs, **overrides})
    return graph, inputs, example


def _baselines(text, graph, example):
    if text == 'builtin':
        return example.default_baselines(graph) if example else BaselineSpec()
    return parse_baseline(text)


def _error(exc, status):
    return jsonify({'status': 'error', 'message': str(exc)}), status


@app.route('/api/builtins')
def get_builtins():
    """Built-in example graphs with their parameters"""
    return jsonify({name: example.describe() for name, example in BUILTINS.items()})


@app.route('/api/ops')
def get_ops():
    return jsonify({name: spec.describe() for name, spec in OPS.items()})


@app.route('/api/distributions')
def get_distributions():
    return jsonify({name: dist.describe() for name, dist in DISTRIBUTIONS.items()})


@app.route('/api/constants')
def get_constants():
    """Defaults and tolerances used by the estimators"""
    return jsonify({'defaults': DEFAULTS, 'tolerances': TOLERANCES})


@app.route('/api/validate', methods=['POST'])
def validate():
    """Differentiability check for each parameter (or the one named by 'theta')"""
    try:
        data = request.get_json(silent=True) or {}
        graph, _, _ = _load_request_graph(data)
        thetas = [graph.resolve(data['theta'])] if data.get('theta') is not None else list(graph.params)
        reports = {graph.nodes[t].name or str(t): validate_differentiability(graph, t).to_dict() for t in thetas}
        return jsonify({'status': 'success', 'reports': reports})
    except (SCGError, ValueError) as e:
        return _error(e, 400)
    except Exception as e:
        logger.error(f"Validation error: {str(e)}", exc_info=True)
        return _error(e, 500)


@app.route('/api/estimate', methods=['POST'])
def run_estimate():
    """Monte Carlo gradient estimate; same report fields as the CLI's JSON output"""
    try:
        data = request.get_json(silent=True) or {}
        graph, inputs, example = _load_request_graph(data)
        samples = int(data.get('samples', DEFAULTS['samples']))
        if not 1 <= samples <= MAX_SAMPLES:
            raise ValueError(f"samples must be between 1 and {MAX_SAMPLES}")
        theta = resolve_theta(graph, data['theta']) if data.get('theta') is not None else None
        baselines = _baselines(data.get('baseline', DEFAULTS['baseline']), graph, example)

        result = estimate(graph, inputs, theta, n_samples=samples, seed=int(data.get('seed', DEFAULTS['seed'])),
                          method=data.get('method', DEFAULTS['method']), baselines=baselines)
        report = {
            'status': 'success',
            'source': data.get('builtin') or 'graph',
            **result.to_dict(graph),
            'timestamp': datetime.now(timezone.utc).isoformat(),
        }
        return jsonify(report)
    except (SCGError, ValueError) as e:
        return _error(e, 400)
    except Exception as e:
        logger.error(f"Estimate error: {str(e)}", exc_info=True)
        return _error(e, 500)


@app.route('/api/oracle', methods=['POST'])
def run_oracle():
    """Exact expectation and gradient by enumeration / quadrature"""
    try:
        data = request.get_json(silent=True) or {}
        graph, inputs, _ = _load_request_graph(data)
        thetas = [resolve_theta(graph, data['theta'])] if data.get('theta') is not None else list(graph.params)
        order = data.get('quadrature_order')
        gradient = {graph.nodes[t].name or str(t): exact_gradient(graph, inputs, t, order).tolist() for t in thetas}
        return jsonify({
            'status': 'success',
            'expectation': exact_expectation(graph, inputs, order),
            'gradient': gradient,
        })
    except (SCGError, ValueError) as e:
        return _error(e, 400)
    except Exception as e:
        logger.error(f"Oracle error: {str(e)}", exc_info=True)
        return _error(e, 500)


if __name__ == '__main__':
    # Use port 5001 to avoid conflicts with macOS AirPlay Receiver on port 5000
    logging.basicConfig(level=os.environ.get(ENV['log_level'], 'INFO').upper())
    port = int(os.environ.get(ENV['port'], DEFAULTS['port']))
    app.run(host='0.0.0.0', port=port, debug=True)
