// Serving shim: static SPA plus a same-origin proxy to the production
// server's JSON endpoints, so session cookies flow without CORS fuss.
//
//   PRODKIT_SERVER  upstream submit server (default http://127.0.0.1:9070)
//   UI_PORT         listen port (default 8600)

import express from 'express';
import path from 'node:path';
import { fileURLToPath } from 'node:url';

const upstream = (process.env.PRODKIT_SERVER ?? 'http://127.0.0.1:9070').replace(/\/$/, '');
const port = Number(process.env.UI_PORT ?? '8600');
const here = path.dirname(fileURLToPath(import.meta.url));

const app = express();
app.use(express.raw({ type: () => true, limit: '64mb' }));

async function proxy(req: express.Request, res: express.Response) {
  const target = upstream + req.originalUrl;
  const headers: Record<string, string> = {};
  for (const name of ['content-type', 'cookie', 'authorization']) {
    const value = req.headers[name];
    if (typeof value === 'string') headers[name] = value;
  }
  try {
    const body =
      req.method === 'GET' || req.method === 'HEAD' || !Buffer.isBuffer(req.body)
        ? undefined
        : new Uint8Array(req.body);
    const resp = await fetch(target, { method: req.method, headers, body });
    res.status(resp.status);
    const setCookie = resp.headers.get('set-cookie');
    if (setCookie) res.setHeader('set-cookie', setCookie);
    const contentType = resp.headers.get('content-type');
    if (contentType) res.setHeader('content-type', contentType);
    res.send(Buffer.from(await resp.arrayBuffer()));
  } catch (err) {
    res.status(502).json({ error: `upstream ${upstream} unreachable: ${String(err)}` });
  }
}

app.all(/^\/(api|rpc|ping|data)(\/.*)?$/, proxy);
app.use(express.static(path.join(here, '..', 'public')));
app.use(express.static(here)); // compiled browser modules

app.listen(port, () => {
  console.log(`prodkit ui on http://127.0.0.1:${port} -> ${upstream}`);
});
