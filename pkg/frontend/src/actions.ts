// Control surface of the UI. Every button here must map to an RPC
// method the text client can also reach (prodkit-client commands);
// the parity test enforces it.

export interface ControlAction {
  id: string;
  label: string;
  scope: 'dataset' | 'job';
  action: 'suspend' | 'resume' | 'reset';
  rpcMethod: string;
}

export const CONTROL_ACTIONS: ControlAction[] = [
  { id: 'suspend-dataset', label: 'Suspend', scope: 'dataset', action: 'suspend', rpcMethod: 'control_dataset' },
  { id: 'resume-dataset',  label: 'Resume',  scope: 'dataset', action: 'resume',  rpcMethod: 'control_dataset' },
  { id: 'reset-dataset',   label: 'Reset',   scope: 'dataset', action: 'reset',   rpcMethod: 'control_dataset' },
  { id: 'suspend-job',     label: 'Suspend', scope: 'job',     action: 'suspend', rpcMethod: 'control_job' },
  { id: 'resume-job',      label: 'Resume',  scope: 'job',     action: 'resume',  rpcMethod: 'control_job' },
  { id: 'reset-job',       label: 'Reset',   scope: 'job',     action: 'reset',   rpcMethod: 'control_job' },
];

export function actionsFor(scope: 'dataset' | 'job'): ControlAction[] {
  return CONTROL_ACTIONS.filter((a) => a.scope === scope);
}
